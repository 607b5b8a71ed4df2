use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Corner-aligned: output corners sample input corners exactly.
    Bilinear,
}

/// Source row pair and weight for each corner-aligned output coordinate.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<T: Element> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        if numel(shape) != numel(&in_shape) {
            invalid!("reshape: {in_shape:?} into {shape:?}");
        }
        let value = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            value,
            &[x],
            Box::new(move |args| vec![Some(args.grad.clone().reshape(&in_shape).expect("same numel"))]),
        )
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            invalid!("permute: {perm:?} is not a permutation of rank {}", shape.len());
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push(
            "permute",
            Tensor::from_vec(&out_shape, data)?,
            &[x],
            Box::new(move |args| {
                let (s, d) = permute_data(args.grad.data(), args.grad.shape(), &inverse);
                vec![Some(Tensor::from_vec(&s, d).expect("permuted shape"))]
            }),
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else { invalid!("concat: no inputs") };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            invalid!("concat: axis {axis} out of range for rank {}", base.len());
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let conformable = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !conformable {
                invalid!("concat: {s:?} does not match {base:?} off axis {axis}");
            }
            sizes.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        self.push(
            "concat",
            Tensor::from_vec(&out_shape, data)?,
            xs,
            Box::new(move |args| {
                let g = args.grad.data();
                let mut start = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (i, &sz) in sizes.iter().enumerate() {
                    if !args.needs[i] {
                        grads.push(None);
                        start += sz;
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let row = (o * total + start) * inner;
                        d.extend_from_slice(&g[row..row + sz * inner]);
                    }
                    grads.push(Some(Tensor::from_vec(args.inputs[i].shape(), d).expect("slice shape")));
                    start += sz;
                }
                grads
            }),
        )
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            invalid!("slice: [{start}, {}) on axis {axis} of {shape:?}", start + len);
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = (o * full + start) * inner;
            data.extend_from_slice(&src[row..row + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_vec(&out_shape, data)?,
            &[x],
            Box::new(move |args| {
                let mut gx = Tensor::zeros(&shape);
                let g = args.grad.data();
                let dst = gx.data_mut();
                for o in 0..outer {
                    let row = (o * full + start) * inner;
                    dst[row..row + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Doubles the two trailing spatial axes of a `[B, C, H, W]` tensor.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            invalid!("upsample2x: expected [B,C,H,W], got {shape:?}");
        };
        let (ho, wo) = (2 * h, 2 * w);
        let planes = b * c;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        let rows = bilinear_taps(h, ho);
        let cols = bilinear_taps(w, wo);
        for p in 0..planes {
            let xin = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            match mode {
                UpsampleMode::Nearest => {
                    for i in 0..ho {
                        for j in 0..wo {
                            dst[i * wo + j] = xin[(i / 2) * w + j / 2];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                        let fr = T::from_f64_lossy(fr);
                        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                            let fc = T::from_f64_lossy(fc);
                            let top = xin[r0 * w + c0] * (T::one() - fc) + xin[r0 * w + c1] * fc;
                            let bot = xin[r1 * w + c0] * (T::one() - fc) + xin[r1 * w + c1] * fc;
                            dst[i * wo + j] = top * (T::one() - fr) + bot * fr;
                        }
                    }
                }
            }
        }
        self.push(
            "upsample2x",
            Tensor::from_vec(&[b, c, ho, wo], out)?,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                let dst_all = gx.data_mut();
                for p in 0..planes {
                    let gin = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut dst_all[p * h * w..(p + 1) * h * w];
                    match mode {
                        UpsampleMode::Nearest => {
                            for i in 0..ho {
                                for j in 0..wo {
                                    let d = &mut dst[(i / 2) * w + j / 2];
                                    *d = *d + gin[i * wo + j];
                                }
                            }
                        }
                        UpsampleMode::Bilinear => {
                            for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                                let fr = T::from_f64_lossy(fr);
                                for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                                    let fc = T::from_f64_lossy(fc);
                                    let gv = gin[i * wo + j];
                                    let top = gv * (T::one() - fr);
                                    let bot = gv * fr;
                                    dst[r0 * w + c0] = dst[r0 * w + c0] + top * (T::one() - fc);
                                    dst[r0 * w + c1] = dst[r0 * w + c1] + top * fc;
                                    dst[r1 * w + c0] = dst[r1 * w + c0] + bot * (T::one() - fc);
                                    dst[r1 * w + c1] = dst[r1 * w + c1] + bot * fc;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn nearest_upsample_definition() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.upsample2x(x, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_is_corner_aligned() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(t(&[1, 1, 1, 1], &[7.0])).unwrap();
        let y = tape.upsample2x(c, UpsampleMode::Bilinear).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0; 4]);

        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 3.0, 6.0, 9.0])).unwrap();
        let y = tape.upsample2x(x, UpsampleMode::Bilinear).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(v.at(&[0, 0, 0, 3]), 3.0);
        assert_eq!(v.at(&[0, 0, 3, 0]), 6.0);
        assert_eq!(v.at(&[0, 0, 3, 3]), 9.0);
        assert!((v.at(&[0, 0, 0, 1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[1, 1, 2], &[5.0, 6.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
        assert!(tape.concat(&[a, b], 3).is_err());
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = tape.permute(a, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(tape.permute(a, &[0, 0]).is_err());
    }
}
