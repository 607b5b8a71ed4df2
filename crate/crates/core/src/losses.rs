//! Segmentation, contrastive retrieval and focal losses, and their weighted mix.

use stpnet_autodiff::{Element, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};

pub const DICE_EPS: f64 = 1e-6;

/// `(1 - soft Dice) + BCE`. Dice is computed per sample and averaged over
/// the batch; BCE is averaged over all pixels.
pub fn seg_loss<T: Element>(tape: &mut Tape<T>, logits: Var, gt: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if tape.shape(gt) != s.as_slice() {
        invalid!("seg loss: logits {s:?} and mask {:?} differ", tape.shape(gt));
    }
    if tape.value(gt).data().iter().any(|&v| v != T::zero() && v != T::one()) {
        invalid!("seg loss: ground truth must be binary");
    }
    let axes: Vec<usize> = (1..s.len()).collect();
    let p = tape.sigmoid(logits)?;
    let py = tape.mul(p, gt)?;
    let inter = tape.sum_axes(py, &axes, false)?;
    let sp = tape.sum_axes(p, &axes, false)?;
    let sy = tape.sum_axes(gt, &axes, false)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let dice = tape.div(num, den)?;
    let dice = tape.mean_all(dice)?;
    let dice_loss = tape.rsub_scalar(dice, 1.0)?;
    // BCE with logits: softplus(z) - y z
    let sp = tape.softplus(logits)?;
    let yz = tape.mul(gt, logits)?;
    let bce = tape.sub(sp, yz)?;
    let bce = tape.mean_all(bce)?;
    Ok(tape.add(dice_loss, bce)?)
}

fn unit_rows(c: &Tensor<f64>) -> Result<Tensor<f64>> {
    let &[_, d] = c.shape() else { invalid!("candidates must be [n, D], got {:?}", c.shape()) };
    let mut out = c.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Numeric("zero-norm candidate vector".into()));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Cosine-similarity logits `cos(F_v, t_j) / tau`, `[B, n]`.
pub fn cosine_logits<T: Element>(tape: &mut Tape<T>, f_v: Var, candidates: &Tensor<f64>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        invalid!("tau must be positive, got {tau}");
    }
    let unit = tape.constant(unit_rows(candidates)?.cast())?;
    let sq = tape.mul(f_v, f_v)?;
    let ss = tape.sum_axes(sq, &[1], true)?;
    let norm = tape.sqrt(ss)?;
    let fnorm = tape.div(f_v, norm)?;
    let cos = tape.linear(fnorm, unit, None)?;
    Ok(tape.scale(cos, 1.0 / tau)?)
}

/// Per category `-log softmax(cos / tau)[positive]`, batch-averaged; returns
/// the sum over categories and each term. `positives[c][b]` indexes the
/// candidates of category `c`.
pub fn retrieval_loss<T: Element>(
    tape: &mut Tape<T>,
    f_v: Var,
    candidates: &[&Tensor<f64>],
    positives: &[&[usize]],
    tau: f64,
) -> Result<(Var, Vec<Var>)> {
    if candidates.len() != positives.len() || candidates.is_empty() {
        invalid!("retrieval loss: {} candidate sets for {} label sets", candidates.len(), positives.len());
    }
    let mut terms = Vec::with_capacity(candidates.len());
    for (cands, pos) in candidates.iter().zip(positives) {
        let logits = cosine_logits(tape, f_v, cands, tau)?;
        let ls = tape.log_softmax(logits, 1)?;
        let picked = tape.gather_rows(ls, pos)?;
        let m = tape.mean_all(picked)?;
        terms.push(tape.neg(m)?);
    }
    Ok((sum(tape, &terms)?, terms))
}

/// Per category `-(1 - p*)^gamma ln p*` with `p* = softmax(logits)[positive]`,
/// batch-averaged. `gamma` must be 0 or at least 1 for a finite gradient at
/// `p* = 1`.
pub fn focal_loss<T: Element>(tape: &mut Tape<T>, logits: &[Var], positives: &[&[usize]], gamma: f64) -> Result<(Var, Vec<Var>)> {
    if logits.len() != positives.len() || logits.is_empty() {
        invalid!("focal loss: {} heads for {} label sets", logits.len(), positives.len());
    }
    if !(gamma == 0.0 || gamma >= 1.0) {
        invalid!("focal gamma must be 0 or >= 1, got {gamma}");
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&z, pos) in logits.iter().zip(positives) {
        let ls = tape.log_softmax(z, 1)?;
        let lp = tape.gather_rows(ls, pos)?;
        let weighted = if gamma == 0.0 {
            lp
        } else {
            let p = tape.exp(lp)?;
            let q = tape.rsub_scalar(p, 1.0)?;
            let w = tape.powf(q, gamma)?;
            tape.mul(w, lp)?
        };
        let m = tape.mean_all(weighted)?;
        terms.push(tape.neg(m)?);
    }
    Ok((sum(tape, &terms)?, terms))
}

fn sum<T: Element>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Lambdas {
    pub seg: f64,
    pub retrieval: f64,
    pub focal: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { seg: 1.0, retrieval: 1.0, focal: 1.0 }
    }
}

/// `l1 seg + l2 retrieval + l3 focal`; zero-weighted terms are left out of
/// the graph entirely.
pub fn mix_loss<T: Element>(tape: &mut Tape<T>, seg: Var, retrieval: Var, focal: Var, l: Lambdas) -> Result<Var> {
    let mut parts = Vec::new();
    for (v, w) in [(seg, l.seg), (retrieval, l.retrieval), (focal, l.focal)] {
        if w != 0.0 {
            parts.push(tape.scale(v, w)?);
        }
    }
    if parts.is_empty() {
        invalid!("all loss weights are zero");
    }
    sum(tape, &parts)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub retrieval: f64,
    pub focal: f64,
    pub mix: f64,
    pub retrieval_terms: [f64; 4],
}

impl LossReport {
    pub fn mix_of(seg: f64, retrieval: f64, focal: f64, l: Lambdas) -> f64 {
        l.seg * seg + l.retrieval * retrieval + l.focal * focal
    }
}
