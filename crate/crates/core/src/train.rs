//! Optimizer, training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stpnet_autodiff::{Element, Graph, ParamStore, Tensor};

use crate::error::{invalid, Error, Result};
use crate::losses::{Lambdas, LossReport};
use crate::metrics::{mask_metrics, EvalRecord, MaskMetrics};
use crate::model::{ForwardOptions, StpnetModel};
use crate::synthgen::{batch_tensors, SegSample};
use crate::textbank::EncodedBank;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation Dice improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub options: ForwardOptions,
    /// Replaces the model config's loss weights when set.
    pub lambdas: Option<Lambdas>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 8,
            epochs: 30,
            patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            n_train: 512,
            n_val: 64,
            n_test: 128,
            options: ForwardOptions::default(),
            lambdas: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            invalid!("lr must be positive and batch_size, epochs at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            invalid!("betas must lie in [0, 1) and adam_eps be positive");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            invalid!("split sizes must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction; state is kept per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, grads: &[(stpnet_autodiff::ParamId, Tensor<T>)]) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let i = id.index();
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let w = store.get_mut(*id).data_mut();
            for k in 0..n {
                let gk = g.data()[k].as_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let upd = self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                w[k] = T::from_f64_lossy(w[k].as_f64() - upd);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the loss components.
    pub train: LossReport,
    pub val: EvalRecord,
    pub best_val_dice: f64,
    pub improved: bool,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation Dice.
    pub model: StpnetModel<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Trains `model` in place on `train`, selecting on `val`. `on_epoch` sees
/// every log record as it is produced.
pub fn train(
    model: &mut StpnetModel<f32>,
    bank: &EncodedBank,
    cfg: &TrainConfig,
    train: &[SegSample],
    val: &[SegSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        invalid!("training and validation sets must be non-empty");
    }
    check_samples(model, train)?;
    let lambdas = cfg.lambdas.unwrap_or(model.cfg().lambdas);
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let mut last_finite = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossReport::default();
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let report = train_step(model, bank, &batch, cfg.options, lambdas, &mut opt).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "epoch {epoch} step {}: {msg}; last finite loss {last_finite:?}",
                    opt.steps() + 1
                )),
                other => other,
            })?;
            last_finite = Some(report.mix);
            accumulate(&mut sum, &report, 1.0);
            batches += 1.0;
        }
        let mut mean = LossReport::default();
        accumulate(&mut mean, &sum, 1.0 / batches);

        let val_rec = evaluate(model, bank, val, cfg.options, "val")?;
        let improved = best.as_ref().map_or(true, |(d, _, _)| val_rec.dice > *d);
        if improved {
            best = Some((val_rec.dice, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = EpochRecord {
            epoch,
            train: mean,
            val: val_rec,
            best_val_dice: best.as_ref().map_or(0.0, |b| b.0),
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (seg {:.4} ret {:.4} focal {:.4}) val dice {:.4} retrieval {:.3}",
            mean.mix,
            mean.seg,
            mean.retrieval,
            mean.focal,
            rec.val.dice,
            rec.val.mean_retrieval()
        );
        on_epoch(&rec);
        log.push(rec);
        if stale >= cfg.patience {
            log::info!("early stop after {epoch} epochs");
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome { model: model.clone(), best_epoch, log })
}

fn accumulate(acc: &mut LossReport, r: &LossReport, w: f64) {
    acc.seg += w * r.seg;
    acc.retrieval += w * r.retrieval;
    acc.focal += w * r.focal;
    acc.mix += w * r.mix;
    for (a, b) in acc.retrieval_terms.iter_mut().zip(r.retrieval_terms) {
        *a += w * b;
    }
}

/// Forward, loss, backward and one optimizer update on a batch.
pub fn train_step(
    model: &mut StpnetModel<f32>,
    bank: &EncodedBank,
    batch: &[&SegSample],
    opts: ForwardOptions,
    lambdas: Lambdas,
    opt: &mut Adam,
) -> Result<LossReport> {
    let (img, masks) = batch_tensors::<f32>(batch)?;
    let labels: Vec<_> = batch.iter().map(|s| s.labels).collect();
    let net = &model.net;
    let mut g = Graph::new(&mut model.store, true);
    let out = net.forward(&mut g, &img, bank, opts, Some(&labels))?;
    let (loss, report) = net.loss(&mut g, &out, &masks, &labels, bank, lambdas)?;
    if !report.mix.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {report:?}")));
    }
    g.backward(loss)?;
    let grads = g.param_grads();
    drop(g);
    if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {}", model.store.param(*id).name)));
    }
    opt.step(&mut model.store, &grads);
    Ok(report)
}

fn check_samples<T: Element>(model: &StpnetModel<T>, samples: &[SegSample]) -> Result<()> {
    let s = model.cfg().image_size;
    if let Some(bad) = samples.iter().find(|x| x.size != s) {
        invalid!("dataset has {0}x{0} images, model expects {s}x{s}", bad.size);
    }
    Ok(())
}

/// Predicted masks of one eval-mode batch, thresholded at probability 0.5.
pub fn predict<T: Element>(
    model: &StpnetModel<T>,
    bank: &EncodedBank,
    batch: &[&SegSample],
    opts: ForwardOptions,
) -> Result<(Vec<Vec<u8>>, Vec<[usize; 4]>)> {
    let (img, _) = batch_tensors::<T>(batch)?;
    let labels: Vec<_> = batch.iter().map(|s| s.labels).collect();
    let mut store = model.store.clone();
    let mut g = Graph::new(&mut store, false);
    let out = model.net.forward(&mut g, &img, bank, opts, Some(&labels))?;
    let logits = g.tape.value(out.logits);
    let plane = logits.numel() / batch.len();
    let masks = logits.data().chunks_exact(plane).map(|c| c.iter().map(|&v| u8::from(v.as_f64() > 0.0)).collect()).collect();
    Ok((masks, out.retrieval.iter().map(|r| r.j_stars()).collect()))
}

/// Eval-mode retrieval embedding `F_v` of one `size x size` image.
pub fn image_embedding<T: Element>(model: &StpnetModel<T>, image: &[f32]) -> Result<Vec<f64>> {
    let s = model.cfg().image_size;
    if image.len() != s * s {
        invalid!("image has {} pixels, model expects {s}x{s}", image.len());
    }
    let img = Tensor::from_vec(&[1, 1, s, s], image.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect())?;
    let mut store = model.store.clone();
    let mut g = Graph::new(&mut store, false);
    let x = g.tape.constant(img)?;
    let f_v = model.net.retrieval.forward(&mut g, x)?;
    Ok(g.tape.value(f_v).to_f64_vec())
}

/// Eval-mode metrics over `samples`.
pub fn evaluate<T: Element>(
    model: &StpnetModel<T>,
    bank: &EncodedBank,
    samples: &[SegSample],
    opts: ForwardOptions,
    split: &str,
) -> Result<EvalRecord> {
    if samples.is_empty() {
        invalid!("cannot evaluate an empty split");
    }
    check_samples(model, samples)?;
    let mut per = Vec::with_capacity(samples.len());
    let mut hits = [0usize; 4];
    for chunk in samples.chunks(16) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (masks, picks) = predict(model, bank, &refs, opts)?;
        for ((s, m), p) in chunk.iter().zip(&masks).zip(&picks) {
            per.push(mask_metrics(m, &s.mask)?);
            for (h, (a, b)) in hits.iter_mut().zip(p.iter().zip(s.labels.indices())) {
                *h += usize::from(*a == b);
            }
        }
    }
    let m = MaskMetrics::mean(&per);
    let n = samples.len();
    Ok(EvalRecord {
        split: split.to_string(),
        n,
        dice: m.dice,
        iou: m.iou,
        precision: m.precision,
        recall: m.recall,
        retrieval_top1: hits.map(|h| h as f64 / n as f64),
    })
}
