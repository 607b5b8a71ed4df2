use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpnet::blocks::{text_mean, EnBlock, MtBlock, Ssm, UTrans, UpBlock};
use stpnet::synthgen::{batch_tensors, generate_sample, GenConfig};
use stpnet::{ForwardOptions, StpnetConfig, StpnetModel};
use stpnet_autodiff::{Graph, ParamStore, Tensor};

fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn enblock_keeps_resolution_and_is_nonnegative() {
    let mut st = ParamStore::<f64>::new(0);
    let blk = EnBlock::new(&mut st, "en", 1, 16);
    let mut g = Graph::new(&mut st, true);
    let x = g.tape.constant(random(1, &[2, 1, 16, 16])).unwrap();
    let y = blk.forward(&mut g, x).unwrap();
    assert_eq!(g.tape.shape(y), [2, 16, 16, 16]);
    assert!(g.tape.value(y).data().iter().all(|&v| v >= 0.0));
    let bad = g.tape.constant(random(2, &[2, 3, 16, 16])).unwrap();
    assert!(blk.forward(&mut g, bad).unwrap_err().is_invalid_argument());
}

#[test]
fn text_mean_is_the_grand_mean() {
    let t = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(text_mean(&t), 2.5);
}

#[test]
fn mtblock_zero_text_equals_zero_constant_channel() {
    let mut st = ParamStore::<f64>::new(0);
    let blk = MtBlock::new(&mut st, "mt", 3, 5);
    let x = random(3, &[2, 3, 8, 8]);
    let run = |st: &mut ParamStore<f64>, x: &Tensor<f64>, means: &[f64]| {
        let mut g = Graph::new(st, false);
        let v = g.tape.constant(x.clone()).unwrap();
        let y = blk.forward(&mut g, v, means).unwrap();
        g.tape.value(y).clone()
    };
    let zero_text = text_mean(&Tensor::<f64>::zeros(&[8, 32]));
    let a = run(&mut st, &x, &[zero_text, zero_text]);
    let b = run(&mut st, &x, &[0.0, 0.0]);
    assert_eq!(a, b);
    assert_eq!(a.shape(), [2, 5, 4, 4]);
    // the constant channel matters once it is non-zero
    let c = run(&mut st, &x, &[2.5, -1.0]);
    assert_ne!(a, c);
}

#[test]
fn ssm_with_zero_output_projection_is_exact_identity() {
    for (seed, shape) in [(0u64, [1, 4, 16, 16]), (1, [2, 8, 5, 7]), (2, [1, 3, 1, 1])] {
        let mut st = ParamStore::<f32>::new(seed);
        let ssm = Ssm::new(&mut st, "ssm", shape[1], &[6, 12, 18]);
        assert!(st.get(ssm.proj_out.w).data().iter().all(|&v| v == 0.0));
        let x = random(seed + 10, &shape).cast::<f32>();
        let mut g = Graph::new(&mut st, true);
        let v = g.tape.constant(x.clone()).unwrap();
        let y = ssm.forward(&mut g, v).unwrap();
        let out = g.tape.value(y);
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "not bit-identical for {shape:?}");
    }
}

#[test]
fn utrans_keeps_image_tokens_and_attention_rows_are_stochastic() {
    let (c, side, d, heads) = (8, 4, 6, 2);
    let mut st = ParamStore::<f64>::new(0);
    let ut = UTrans::new(&mut st, "ut", c, side, d, heads, 2);
    let x = random(4, &[2, c, side, side]);
    for m in [1, 5, 8] {
        let mut g = Graph::new(&mut st, false);
        let xv = g.tape.constant(x.clone()).unwrap();
        let t = g.tape.constant(random(5, &[2, m, d])).unwrap();
        let out = ut.forward(&mut g, xv, Some(t)).unwrap();
        assert_eq!(g.tape.shape(out.output), [2, c, side, side]);
        let n = side * side + m;
        let w = g.tape.value(out.weights);
        assert_eq!(w.shape(), [2 * heads, n, n]);
        for row in w.data().chunks_exact(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn utrans_without_text_is_plain_self_attention() {
    let (c, side) = (8, 4);
    let mut st = ParamStore::<f64>::new(0);
    let ut = UTrans::new(&mut st, "ut", c, side, 6, 2, 2);
    let x = random(6, &[1, c, side, side]);
    let mut g = Graph::new(&mut st, false);
    let xv = g.tape.constant(x.clone()).unwrap();
    let none = ut.forward(&mut g, xv, None).unwrap();
    assert_eq!(g.tape.shape(none.weights), [2, 16, 16]);
    let empty = g.tape.constant(Tensor::zeros(&[1, 0, 6]));
    // zero-length text either matches the text-free path or is rejected as a shape error
    if let Ok(e) = empty {
        if let Ok(out) = ut.forward(&mut g, xv, Some(e)) {
            assert_eq!(g.tape.value(out.output), g.tape.value(none.output));
        }
    }
}

#[test]
fn upblock_shapes_and_zero_input() {
    let mut st = ParamStore::<f64>::new(0);
    let up = UpBlock::new(&mut st, "up", 8, 4, 4);
    let mut g = Graph::new(&mut st, true);
    let x = g.tape.constant(Tensor::zeros(&[2, 8, 4, 4])).unwrap();
    let skip = g.tape.constant(Tensor::zeros(&[2, 4, 8, 8])).unwrap();
    let y = up.forward(&mut g, x, skip).unwrap();
    assert_eq!(g.tape.shape(y), [2, 4, 8, 8]);
    // zero input and zero biases give zero pre-BN activations, hence zero after BN and ReLU
    assert!(g.tape.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.tape.constant(Tensor::zeros(&[2, 4, 6, 6])).unwrap();
    assert!(up.forward(&mut g, x, bad).unwrap_err().is_invalid_argument());
}

fn batch(cfg: &StpnetConfig, n: u64) -> (Tensor<f32>, Tensor<f32>, Vec<stpnet::synthgen::Labels>) {
    let gen = GenConfig::for_size(cfg.image_size);
    let samples: Vec<_> = (0..n).map(|s| generate_sample(s, &gen).unwrap()).collect();
    let refs: Vec<_> = samples.iter().collect();
    let (img, masks) = batch_tensors(&refs).unwrap();
    (img, masks, samples.iter().map(|s| s.labels).collect())
}

#[test]
fn full_forward_shapes_and_eval_determinism() {
    let cfg = StpnetConfig::default();
    let model = StpnetModel::<f32>::new(&cfg).unwrap();
    let bank = cfg.text_bank().unwrap();
    let (img, _, _) = batch(&cfg, 2);
    let run = || {
        let mut st = model.store.clone();
        let mut g = Graph::new(&mut st, false);
        let out = model.net.forward(&mut g, &img, &bank, ForwardOptions::default(), None).unwrap();
        assert_eq!(g.tape.shape(out.logits), [2, 1, 64, 64]);
        assert_eq!(g.tape.shape(out.f_v), [2, 32]);
        let up: Vec<Vec<usize>> = out.up.iter().map(|&u| g.tape.shape(u).to_vec()).collect();
        assert_eq!(up, [vec![2, 128, 8, 8], vec![2, 64, 16, 16], vec![2, 32, 32, 32], vec![2, 16, 64, 64]]);
        g.tape.value(out.logits).clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let count = |cfg: &StpnetConfig| {
        let m = StpnetModel::<f32>::new(cfg).unwrap();
        m.store.iter().map(|(_, p)| p.value.numel()).sum::<usize>()
    };
    let base = StpnetConfig::default();
    let n = count(&base);
    assert_eq!(n, count(&StpnetConfig { seed: 99, text_seed: 5, tau: 0.2, ..base.clone() }));
    assert_ne!(n, count(&StpnetConfig { utrans_stages: vec![3, 4], ..base.clone() }));
    assert_ne!(n, count(&StpnetConfig::reduced()));
}

#[test]
fn every_trainable_parameter_gets_a_gradient_and_text_stays_frozen() {
    let cfg = StpnetConfig::reduced();
    let mut model = StpnetModel::<f32>::new(&cfg).unwrap();
    let bank = cfg.text_bank().unwrap();
    let before = bank.features(stpnet::textbank::Category::LeftLoc).to_vec();
    let (img, masks, labels) = batch(&cfg, 3);
    let net = model.net.clone();
    let mut g = Graph::new(&mut model.store, true);
    let out = net.forward(&mut g, &img, &bank, ForwardOptions::default(), Some(&labels)).unwrap();
    let (loss, _) = net.loss(&mut g, &out, &masks, &labels, &bank, cfg.lambdas).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    drop(g);
    let trainable: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in &trainable {
        assert!(grads.iter().any(|(g, _)| g == id), "{} unreachable", model.store.param(*id).name);
    }
    assert_eq!(grads.len(), trainable.len());
    assert!(model.store.iter().all(|(_, p)| !p.name.starts_with("text")));
    assert_eq!(bank.features(stpnet::textbank::Category::LeftLoc), before.as_slice());
}

#[test]
fn no_text_changes_output_but_keeps_it_finite() {
    let cfg = StpnetConfig::reduced();
    let model = StpnetModel::<f32>::new(&cfg).unwrap();
    let bank = cfg.text_bank().unwrap();
    let (img, _, _) = batch(&cfg, 2);
    let run = |opts: ForwardOptions| {
        let mut st = model.store.clone();
        let mut g = Graph::new(&mut st, false);
        let out = model.net.forward(&mut g, &img, &bank, opts, None).unwrap();
        if opts.no_text {
            assert!(out.text.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        g.tape.value(out.logits).clone()
    };
    let full = run(ForwardOptions::default());
    let none = run(ForwardOptions { no_text: true, ..ForwardOptions::default() });
    assert!(none.data().iter().all(|v| v.is_finite()));
    assert_ne!(full, none);
}
