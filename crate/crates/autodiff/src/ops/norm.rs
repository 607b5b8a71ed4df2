use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics, for updating running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<T>,
}

/// Shared normalization backward over groups of `n` elements:
/// `dx = inv / n * (n * dxh - sum(dxh) - xh * sum(dxh * xh))`.
fn normalized_backward<'a, T: Element>(dxh: &'a [T], xh: &'a [T], inv: T) -> impl Iterator<Item = T> + 'a {
    let n = T::from_usize(dxh.len()).expect("count fits");
    let s1 = dxh.iter().fold(T::zero(), |a, &v| a + v);
    let s2 = dxh.iter().zip(xh).fold(T::zero(), |a, (&d, &x)| a + d * x);
    dxh.iter().zip(xh).map(move |(&d, &x)| inv / n * (n * d - s1 - x * s2))
}

impl<T: Element> Tape<T> {
    /// Per-channel normalization of `[B, C, H, W]` with affine `gamma`, `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else { invalid!("batch_norm: expected [B,C,H,W], got {shape:?}") };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            invalid!("batch_norm: affine params must be [{c}]");
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::from_f64_lossy(NORM_EPS);
        let src = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    invalid!("batch_norm: train mode needs B*H*W >= 2, got {count}");
                }
                let n = T::from_usize(count).expect("count fits");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let chan = || (0..b).flat_map(move |bi| (0..plane).map(move |i| (bi * c + ch) * plane + i));
                    let m = chan().fold(T::zero(), |a, i| a + src[i]) / n;
                    let v = chan().fold(T::zero(), |a, i| a + (src[i] - m) * (src[i] - m)) / n;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = var.iter().map(|&v| v * n / (n - T::one())).collect();
                (mean.clone(), var, Some(BatchStats { mean, var: unbiased }))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    invalid!("batch_norm: running stats must have {c} entries");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * plane..(bi * c + ch + 1) * plane;
                for i in r {
                    xhat[i] = (src[i] - mean[ch]) * inv[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        let var = self.push(
            "batch_norm",
            Tensor::from_vec(&shape, out)?,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = args.needs[0].then(|| vec![T::zero(); g.len()]);
                for ch in 0..c {
                    let idx: Vec<usize> =
                        (0..b).flat_map(|bi| (0..plane).map(move |i| (bi * c + ch) * plane + i)).collect();
                    for &i in &idx {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                    if let Some(dx) = dx.as_mut() {
                        if train {
                            let dxh: Vec<T> = idx.iter().map(|&i| g[i] * gamma[ch]).collect();
                            let xh: Vec<T> = idx.iter().map(|&i| xhat[i]).collect();
                            for (&i, v) in idx.iter().zip(normalized_backward(&dxh, &xh, inv[ch])) {
                                dx[i] = v;
                            }
                        } else {
                            for &i in &idx {
                                dx[i] = g[i] * gamma[ch] * inv[ch];
                            }
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::from_vec(&shape, d).expect("x shape")),
                    Some(Tensor::from_vec(&[c], dgamma).expect("gamma shape")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("beta shape")),
                ]
            }),
        )?;
        Ok((var, stats))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            invalid!("layer_norm: affine params must be [{d}]");
        }
        let eps = T::from_f64_lossy(NORM_EPS);
        let n = T::from_usize(d).expect("dim fits");
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let v = row.iter().fold(T::zero(), |a, &x| a + (x - m) * (x - m)) / n;
            inv[r] = T::one() / (v + eps).sqrt();
            for j in 0..d {
                xhat[r * d + j] = (row[j] - m) * inv[r];
                out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::from_vec(&shape, out)?,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gamma = args.inputs[1].data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gr[j] * xh[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    let dxh: Vec<T> = gr.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                    for (j, v) in normalized_backward(&dxh, xh, inv[r]).enumerate() {
                        dx[r * d + j] = v;
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx).expect("x shape")),
                    Some(Tensor::from_vec(&[d], dgamma).expect("gamma shape")),
                    Some(Tensor::from_vec(&[d], dbeta).expect("beta shape")),
                ]
            }),
        )
    }
}
