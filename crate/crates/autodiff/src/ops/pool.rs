use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl<T: Element> Tape<T> {
    /// Non-overlapping `k x k` max pooling (stride `k`). Gradient goes to the
    /// first maximal element of each window in row-major order.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else { invalid!("maxpool2d: expected [B,C,H,W], got {shape:?}") };
        if k == 0 || h % k != 0 || w % k != 0 {
            invalid!("maxpool2d: {h}x{w} not divisible by window {k}");
        }
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let plane = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = plane + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = plane + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    arg.push(best as u32);
                }
            }
        }
        self.push(
            "maxpool2d",
            Tensor::from_vec(&[b, c, ho, wo], out)?,
            &[x],
            Box::new(move |args| {
                let mut gx = Tensor::zeros(args.inputs[0].shape());
                let d = gx.data_mut();
                for (&i, &g) in arg.iter().zip(args.grad.data()) {
                    d[i as usize] = d[i as usize] + g;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Spatial max of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_max_pool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            invalid!("global_max_pool2d: expected [B,C,H,W], got {shape:?}");
        };
        let src = self.value(x).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * c);
        let mut arg = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let s = &src[p * plane..(p + 1) * plane];
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            out.push(s[best]);
            arg.push(p * plane + best);
        }
        self.push(
            "global_max_pool2d",
            Tensor::from_vec(&[b, c], out)?,
            &[x],
            Box::new(move |args| {
                let mut gx = Tensor::zeros(args.inputs[0].shape());
                let d = gx.data_mut();
                for (&i, &g) in arg.iter().zip(args.grad.data()) {
                    d[i] = g;
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_forward_and_argmax_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 3.0)).unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn indivisible_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4])).unwrap();
        assert!(tape.maxpool2d(x, 2).is_err());
    }

    #[test]
    fn global_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 5.0, -2.0, -3.0]).unwrap()).unwrap();
        let y = tape.global_max_pool2d(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -2.0]);
    }
}
