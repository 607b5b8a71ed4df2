//! Finite-difference checks over every block, the retrieval encoder, each
//! loss and the full objective, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpnet_autodiff::{
    grad_check_with, BatchNormMode, Conv2dSpec, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tape, Tensor,
    UpsampleMode, Var,
};

use crate::blocks::{EnBlock, MtBlock, Ssm, UTrans, UpBlock};
use crate::error::Result;
use crate::losses::{focal_loss, retrieval_loss, seg_loss};
use crate::model::{pooled_matrix, ForwardOptions, StpnetConfig, StpnetModel};
use crate::retrieval::RetrievalEncoder;
use crate::synthgen::{batch_tensors, generate_sample, GenConfig};
use crate::textbank::Category;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    /// Block or loss name, or `op:<tape op>` for a single primitive.
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub eps: f64,
    pub tol: f64,
    pub samples: usize,
    /// Tolerance and sample count for the end-to-end objective.
    pub e2e_tol: f64,
    pub e2e_samples: usize,
    pub seed: u64,
    /// Negative control: corrupt the backward of this op.
    pub fault: Option<&'static str>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, samples: 100, e2e_tol: 1e-3, e2e_samples: 200, seed: 0, fault: None }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

/// Objective `sum(r * f(x))` with a fixed random `r`, checked against the
/// input and every trainable parameter of `store`.
fn check_module<F>(
    store: &ParamStore<f64>,
    input: Tensor<f64>,
    cfg: &SuiteConfig,
    salt: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut theta = vec![input];
    theta.extend(ids.iter().map(|&id| store.get(id).clone()));
    let weights_seed = cfg.seed ^ salt;
    let fault = cfg.fault;
    let eval = |th: &[Tensor<f64>], want: bool| -> stpnet_autodiff::Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(&th[1..]) {
            s.set(id, t.clone())?;
        }
        let mut g = Graph::new(&mut s, true);
        if let Some(op) = fault {
            g.tape.inject_backward_fault(op);
        }
        let x = g.tape.leaf(th[0].clone(), true)?;
        let y = f(&mut g, x).map_err(to_tensor_err)?;
        let r = random(&mut ChaCha8Rng::seed_from_u64(weights_seed), g.tape.shape(y), 1.0);
        let r = g.tape.constant(r)?;
        let p = g.tape.mul(y, r)?;
        let out = g.tape.sum_all(p)?;
        let value = g.tape.value(out).item();
        if !want {
            return Ok((value, None));
        }
        g.backward(out)?;
        let mut grads = vec![g.tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(th[0].shape()))];
        let pg = g.param_grads();
        for (&id, t) in ids.iter().zip(&th[1..]) {
            grads.push(pg.iter().find(|(i, _)| *i == id).map_or_else(|| Tensor::zeros(t.shape()), |(_, gr)| gr.clone()));
        }
        Ok((value, Some(grads)))
    };
    let gc = GradCheckConfig { eps: cfg.eps, tol: cfg.tol, samples: cfg.samples, seed: cfg.seed ^ salt };
    Ok(grad_check_with(eval, &theta, &gc)?)
}

fn to_tensor_err(e: crate::Error) -> stpnet_autodiff::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => stpnet_autodiff::Error::Contract(other.to_string()),
    }
}

/// Randomizes every zero-initialized trainable tensor so that no gradient
/// path is trivially dead during the check.
fn perturb_zeros(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let t = store.get(id);
        if t.data().iter().all(|&v| v == 0.0) {
            let r = random(rng, t.shape(), 0.1);
            store.set(id, r).expect("same shape");
        }
    }
}

/// Runs every check at `model_cfg` (normally [`StpnetConfig::reduced`]).
pub fn run_suite(model_cfg: &StpnetConfig, cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let c = model_cfg.base_channels;
    let s = model_cfg.image_size;
    let b = 2;

    out.extend(op_checks(cfg)?);
    let mut push = |name: &str, report| out.push(CheckOutcome { name: name.to_string(), report });

    let mut st = ParamStore::<f64>::new(cfg.seed);
    let blk = EnBlock::new(&mut st, "en", model_cfg.in_channels, c[0]);
    let x = random(&mut rng, &[b, model_cfg.in_channels, s / 2, s / 2], 1.0);
    push("enblock", check_module(&st, x, cfg, 1, |g, x| blk.forward(g, x))?);

    let mut st = ParamStore::<f64>::new(cfg.seed);
    let blk = MtBlock::new(&mut st, "mt", c[0], c[1]);
    let x = random(&mut rng, &[b, c[0], s / 2, s / 2], 1.0);
    let means = [0.3, -0.7];
    push("mtblock", check_module(&st, x, cfg, 2, |g, x| blk.forward(g, x, &means))?);

    let mut st = ParamStore::<f64>::new(cfg.seed);
    let blk = Ssm::new(&mut st, "ssm", 4, &model_cfg.dilations);
    perturb_zeros(&mut st, &mut rng);
    let x = random(&mut rng, &[1, 4, 16, 16], 1.0);
    push("ssm", check_module(&st, x, cfg, 3, |g, x| blk.forward(g, x))?);

    let (ch, side) = (c[2], s >> 2);
    let mut st = ParamStore::<f64>::new(cfg.seed);
    let blk = UTrans::new(&mut st, "ut", ch, side, model_cfg.text_dim, model_cfg.heads.min(ch), model_cfg.ffn_ratio);
    let x = random(&mut rng, &[b, ch, side, side], 1.0);
    let text = random(&mut rng, &[b, model_cfg.text_len, model_cfg.text_dim], 0.5);
    push(
        "utrans",
        check_module(&st, x, cfg, 4, |g, x| {
            let t = g.tape.constant(text.clone())?;
            Ok(blk.forward(g, x, Some(t))?.output)
        })?,
    );

    let mut st = ParamStore::<f64>::new(cfg.seed);
    let blk = UpBlock::new(&mut st, "up", c[2], c[1], c[1]);
    let x = random(&mut rng, &[b, c[2], s / 8, s / 8], 1.0);
    let skip = random(&mut rng, &[b, c[1], s / 4, s / 4], 1.0);
    push(
        "upblock",
        check_module(&st, x, cfg, 5, |g, x| {
            let k = g.tape.constant(skip.clone())?;
            blk.forward(g, x, k)
        })?,
    );

    let mut st = ParamStore::<f64>::new(cfg.seed);
    let enc = RetrievalEncoder::new(&mut st, &model_cfg.retrieval, model_cfg.in_channels, s, model_cfg.text_dim);
    perturb_zeros(&mut st, &mut rng);
    let x = random(&mut rng, &[b, model_cfg.in_channels, s, s], 1.0);
    push("retrieval_encoder", check_module(&st, x, cfg, 6, |g, x| enc.forward(g, x))?);

    // losses, each as a function of its input only; batch sized so every
    // input has at least 100 coordinates
    let lb = 6;
    let empty = ParamStore::<f64>::new(cfg.seed);
    let gt = Tensor::from_vec(&[lb, 1, 6, 6], (0..lb * 36).map(|i| f64::from(u8::from(i % 5 < 2))).collect())?;
    let logits = random(&mut rng, &[lb, 1, 6, 6], 2.0);
    push(
        "seg_loss",
        check_module(&empty, logits, cfg, 7, |g, x| {
            let y = g.tape.constant(gt.clone())?;
            seg_loss(&mut g.tape, x, y)
        })?,
    );

    let bank = model_cfg.text_bank()?;
    let cands: Vec<Tensor<f64>> = Category::ALL.iter().map(|&c| pooled_matrix(&bank, c)).collect();
    let pos: Vec<Vec<usize>> = Category::ALL.iter().map(|c| (0..lb).map(|_| rng.gen_range(0..c.size())).collect()).collect();
    let f_v = random(&mut rng, &[lb, model_cfg.text_dim], 1.0);
    push(
        "retrieval_loss",
        check_module(&empty, f_v, cfg, 8, |g, x| {
            let cr: Vec<&Tensor<f64>> = cands.iter().collect();
            let pr: Vec<&[usize]> = pos.iter().map(Vec::as_slice).collect();
            Ok(retrieval_loss(&mut g.tape, x, &cr, &pr, model_cfg.tau)?.0)
        })?,
    );

    let widths: Vec<usize> = Category::ALL.iter().map(|c| c.size()).collect();
    let total: usize = widths.iter().sum();
    let logits = random(&mut rng, &[lb, total], 2.0);
    push(
        "focal_loss",
        check_module(&empty, logits, cfg, 9, |g, x| {
            let mut parts = Vec::new();
            let mut at = 0;
            for &w in &widths {
                parts.push(g.tape.slice(x, 1, at, w)?);
                at += w;
            }
            let pr: Vec<&[usize]> = pos.iter().map(Vec::as_slice).collect();
            Ok(focal_loss(&mut g.tape, &parts, &pr, model_cfg.gamma)?.0)
        })?,
    );

    push("mix_loss_end_to_end", check_end_to_end(model_cfg, cfg)?);
    Ok(out)
}

/// The full objective against a random sample of all trainable parameters.
pub fn check_end_to_end(model_cfg: &StpnetConfig, cfg: &SuiteConfig) -> Result<GradCheckReport> {
    let mut model = StpnetModel::<f64>::new(model_cfg)?;
    perturb_zeros(&mut model.store, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe2e));
    let bank = model_cfg.text_bank()?;
    let gen = GenConfig::for_size(model_cfg.image_size);
    let samples = [generate_sample(cfg.seed, &gen)?, generate_sample(cfg.seed ^ 1, &gen)?];
    let refs: Vec<_> = samples.iter().collect();
    let (img, masks) = batch_tensors::<f64>(&refs)?;
    let labels: Vec<_> = samples.iter().map(|s| s.labels).collect();
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let theta: Vec<Tensor<f64>> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
    let fault = cfg.fault;
    let eval = |th: &[Tensor<f64>], want: bool| -> stpnet_autodiff::Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut s = model.store.clone();
        for (&id, t) in ids.iter().zip(th) {
            s.set(id, t.clone())?;
        }
        let mut g = Graph::new(&mut s, true);
        if let Some(op) = fault {
            g.tape.inject_backward_fault(op);
        }
        let out = model.net.forward(&mut g, &img, &bank, ForwardOptions::default(), Some(&labels)).map_err(to_tensor_err)?;
        let (loss, _) = model.net.loss(&mut g, &out, &masks, &labels, &bank, model_cfg.lambdas).map_err(to_tensor_err)?;
        let value = g.tape.value(loss).item();
        if !want {
            return Ok((value, None));
        }
        g.backward(loss)?;
        let pg = g.param_grads();
        let grads = ids
            .iter()
            .zip(th)
            .map(|(&id, t)| pg.iter().find(|(i, _)| *i == id).map_or_else(|| Tensor::zeros(t.shape()), |(_, gr)| gr.clone()))
            .collect();
        Ok((value, Some(grads)))
    };
    let gc = GradCheckConfig { eps: cfg.eps, tol: cfg.e2e_tol, samples: cfg.e2e_samples, seed: cfg.seed };
    Ok(grad_check_with(eval, &theta, &gc)?)
}

/// `sum(r * build(theta))` on a fresh tape, with the suite's fault applied.
fn check_tape<F>(theta: &[Tensor<f64>], cfg: &SuiteConfig, salt: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> stpnet_autodiff::Result<Var>,
{
    let eval = |th: &[Tensor<f64>], want: bool| -> stpnet_autodiff::Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        if let Some(op) = cfg.fault {
            tape.inject_backward_fault(op);
        }
        let vars = th.iter().map(|t| tape.param(t.clone())).collect::<stpnet_autodiff::Result<Vec<_>>>()?;
        let y = build(&mut tape, &vars)?;
        let r = random(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ salt), tape.shape(y), 1.0);
        let r = tape.constant(r)?;
        let p = tape.mul(y, r)?;
        let out = tape.sum_all(p)?;
        let value = tape.value(out).item();
        if !want {
            return Ok((value, None));
        }
        tape.backward(out)?;
        let grads =
            vars.iter().zip(th).map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
        Ok((value, Some(grads)))
    };
    let gc = GradCheckConfig { eps: cfg.eps, tol: cfg.tol, samples: cfg.samples, seed: cfg.seed ^ salt };
    Ok(grad_check_with(eval, theta, &gc)?)
}

/// One check per primitive the blocks are built from, so that a broken
/// backward is reported under the op's own name.
pub fn op_checks(cfg: &SuiteConfig) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5);
    let mut out = Vec::new();
    let mut add = |name: &str, rep| out.push(CheckOutcome { name: format!("op:{name}"), report: rep });
    let mut r = |shape: &[usize]| random(&mut rng, shape, 1.0);

    let (x, w, b) = (r(&[2, 4, 8, 8]), r(&[4, 4, 3, 3]), r(&[4]));
    let dil = Conv2dSpec { padding: 2, dilation: 2, ..Conv2dSpec::default() };
    add("conv2d", check_tape(&[x.clone(), w, b], cfg, 11, |t, v| t.conv2d(v[0], v[1], Some(v[2]), dil))?);
    let dw = r(&[4, 1, 3, 3]);
    let spec = Conv2dSpec { padding: 1, groups: 4, ..Conv2dSpec::default() };
    add("conv2d_depthwise", check_tape(&[x.clone(), dw], cfg, 12, |t, v| t.conv2d(v[0], v[1], None, spec))?);
    add("maxpool2d", check_tape(&[x.clone()], cfg, 13, |t, v| t.maxpool2d(v[0], 2))?);
    add("global_max_pool2d", check_tape(&[x.clone()], cfg, 14, |t, v| t.global_max_pool2d(v[0]))?);
    add("upsample2x", check_tape(&[x.clone()], cfg, 15, |t, v| t.upsample2x(v[0], UpsampleMode::Bilinear))?);
    let (gm, bt) = (r(&[4]), r(&[4]));
    add(
        "batch_norm",
        check_tape(&[x.clone(), gm, bt], cfg, 16, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train)?.0))?,
    );
    let (q, k, val) = (r(&[2, 5, 8]), r(&[2, 6, 8]), r(&[2, 6, 8]));
    add(
        "attention",
        check_tape(&[q, k, val], cfg, 17, |t, v| Ok(t.scaled_dot_attention(v[0], v[1], v[2], 2)?.output))?,
    );
    let (s, g1, b1) = (r(&[3, 5, 8]), r(&[8]), r(&[8]));
    add("layer_norm", check_tape(&[s.clone(), g1, b1], cfg, 18, |t, v| t.layer_norm(v[0], v[1], v[2]))?);
    let (lw, lb) = (r(&[6, 8]), r(&[6]));
    add("linear", check_tape(&[s.clone(), lw, lb], cfg, 19, |t, v| t.linear(v[0], v[1], Some(v[2])))?);
    add("bmm", check_tape(&[s.clone(), r(&[3, 4, 8])], cfg, 20, |t, v| t.bmm(v[0], v[1], false, true))?);
    add("softmax", check_tape(&[s.clone()], cfg, 21, |t, v| t.softmax(v[0], 2))?);
    add("log_softmax", check_tape(&[s.clone()], cfg, 22, |t, v| t.log_softmax(v[0], 2))?);
    let e = r(&[3, 7]);
    add(
        "elementwise",
        check_tape(&[e.clone(), r(&[3, 7])], cfg, 23, |t, v| {
            let a = t.relu(v[0])?;
            let b = t.sigmoid(v[1])?;
            let c = t.mul(a, b)?;
            let d = t.softplus(v[0])?;
            let d = t.add_scalar(d, 0.5)?;
            let q = t.div(c, d)?;
            let x2 = t.mul(v[1], v[1])?;
            let x2 = t.add_scalar(x2, 1.0)?;
            let l = t.ln(x2)?;
            let s = t.sqrt(x2)?;
            let ex = t.exp(v[0])?;
            let m = t.sub(l, s)?;
            let m = t.add(m, ex)?;
            t.add(q, m)
        })?,
    );
    Ok(out)
}

/// Names of the checks that failed.
pub fn failures(outcomes: &[CheckOutcome]) -> Vec<&str> {
    outcomes.iter().filter(|o| !o.report.pass).map(|o| o.name.as_str()).collect()
}
