//! Direct-summation references for the conv, pooling and attention kernels.
//! Slow on purpose: no im2col, no blocking, one output element at a time.
//! Shapes are assumed valid.

use crate::{Conv2dSpec, Tensor};

/// Quadruple loop over (batch, out channel, out row, out col) with an inner
/// sum over the group's input channels and kernel taps.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: Conv2dSpec) -> Tensor<f64> {
    let (bn, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * s.padding - s.dilation * (kh - 1) - 1) / s.stride + 1;
    let wo = (wd + 2 * s.padding - s.dilation * (kw - 1) - 1) / s.stride + 1;
    let cout_g = cout / s.groups;
    let mut out = vec![0.0; bn * cout * ho * wo];
    for n in 0..bn {
        for o in 0..cout {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin_g {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                                let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, c, ki, kj]) * x.at(&[n, g * cin_g + c, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[bn, cout, ho, wo], out).unwrap()
}

/// Non-overlapping `k x k` windows.
pub fn naive_maxpool(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let s = x.shape();
    let (ho, wo) = (s[2] / k, s[3] / k);
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            m = m.max(x.at(&[n, c, oy * k + dy, ox * k + dx]));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], ho, wo], out).unwrap()
}

/// Per batch and head: explicit dot products, exponentials and weighted sums.
pub fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Tensor<f64> {
    let (b, t, dk) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dv = v.shape()[2];
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out = vec![0.0; b * t * dv];
    for n in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..hk).map(|d| q.at(&[n, i, h * hk + d]) * k.at(&[n, j, h * hk + d])).sum::<f64>() / (hk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..hv {
                    out[(n * t + i) * dv + h * hv + d] = (0..t).map(|j| e[j] / z * v.at(&[n, j, h * hv + d])).sum();
                }
            }
        }
    }
    Tensor::from_vec(&[b, t, dv], out).unwrap()
}

/// Largest absolute elementwise difference; shapes must match.
pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
