use crate::element::{gemm, Element, MatMut, MatRef};
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logical `r x c` view of a buffer stored transposed when `t`.
fn view<T>(data: &[T], r: usize, c: usize, t: bool) -> MatRef<'_, T> {
    if t {
        MatRef::new(data, c, r).t()
    } else {
        MatRef::new(data, r, c)
    }
}

impl<T: Element> Tape<T> {
    /// `x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let &[out_f, in_f] = ws.as_slice() else { invalid!("linear: weight must be 2-D, got {ws:?}") };
        if xs.last() != Some(&in_f) {
            invalid!("linear: input {xs:?} does not end in {in_f}");
        }
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                invalid!("linear: bias {:?} != [{out_f}]", self.shape(b));
            }
        }
        let rows = self.value(x).numel() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        if let Some(b) = b {
            let bv = self.value(b).data();
            out.chunks_exact_mut(out_f).for_each(|r| r.copy_from_slice(bv));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), rows, in_f),
            MatRef::new(self.value(w).data(), out_f, in_f).t(),
            beta,
            MatMut::new(&mut out, rows, out_f),
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("non-empty") = out_f;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "linear",
            Tensor::from_vec(&out_shape, out)?,
            &parents,
            Box::new(move |args| {
                let (xv, wv, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let gm = MatRef::new(g, rows, out_f);
                let gx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * in_f];
                    gemm(T::one(), gm, MatRef::new(wv.data(), out_f, in_f), T::zero(), MatMut::new(&mut d, rows, in_f));
                    Tensor::from_vec(xv.shape(), d).expect("x shape")
                });
                let gw = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); out_f * in_f];
                    gemm(T::one(), gm.t(), MatRef::new(xv.data(), rows, in_f), T::zero(), MatMut::new(&mut d, out_f, in_f));
                    Tensor::from_vec(&[out_f, in_f], d).expect("w shape")
                });
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    let gb = args.needs[2].then(|| {
                        let mut d = vec![T::zero(); out_f];
                        for r in g.chunks_exact(out_f) {
                            d.iter_mut().zip(r).for_each(|(a, &v)| *a = *a + v);
                        }
                        Tensor::from_vec(&[out_f], d).expect("b shape")
                    });
                    grads.push(gb);
                }
                grads
            }),
        )
    }

    /// Batched product of `[B, M, K]` and `[B, K, N]`. `trans_a` / `trans_b`
    /// mean the operand is stored as `[B, K, M]` / `[B, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (&[ba, a0, a1], &[bb, b0, b1]) = (sa.as_slice(), sb.as_slice()) else {
            invalid!("bmm: operands must be 3-D, got {sa:?} and {sb:?}");
        };
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if ba != bb || k != k2 {
            invalid!("bmm: {sa:?} x {sb:?} (trans {trans_a}, {trans_b}) not conformable");
        }
        let batch = ba;
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                T::one(),
                view(&av[i * m * k..(i + 1) * m * k], m, k, trans_a),
                view(&bv[i * k * n..(i + 1) * k * n], k, n, trans_b),
                T::zero(),
                MatMut::new(&mut out[i * m * n..(i + 1) * m * n], m, n),
            );
        }
        self.push(
            "bmm",
            Tensor::from_vec(&[batch, m, n], out)?,
            &[a, b],
            Box::new(move |args| {
                let (av, bv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let mut ga = args.needs[0].then(|| vec![T::zero(); batch * m * k]);
                let mut gb = args.needs[1].then(|| vec![T::zero(); batch * k * n]);
                for i in 0..batch {
                    let gi = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC B^T, written through A's storage layout.
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        let dst = if trans_a { MatMut::new(dst, k, m).t() } else { MatMut::new(dst, m, k) };
                        gemm(T::one(), gi, view(&bv[i * k * n..(i + 1) * k * n], k, n, trans_b).t(), T::zero(), dst);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        let dst = if trans_b { MatMut::new(dst, n, k).t() } else { MatMut::new(dst, k, n) };
                        gemm(T::one(), view(&av[i * m * k..(i + 1) * m * k], m, k, trans_a).t(), gi, T::zero(), dst);
                    }
                }
                vec![
                    ga.map(|d| Tensor::from_vec(args.inputs[0].shape(), d).expect("a shape")),
                    gb.map(|d| Tensor::from_vec(args.inputs[1].shape(), d).expect("b shape")),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap()).unwrap();
        let w = tape.param(Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let b = tape.param(Tensor::from_f64(&[3], &[0.5, 0.5, 0.5]).unwrap()).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn bmm_transposed_b() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let c = tape.bmm(a, b, false, true).unwrap();
        assert_eq!(tape.shape(c), &[1, 1, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        assert!(tape.bmm(a, b, false, false).is_err());
    }
}
