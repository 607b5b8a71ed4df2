use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Element> Tape<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            invalid!("softmax: axis {axis} out of range for rank {}", shape.len());
        }
        let (outer, len, inner) = split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                let lz = z.ln();
                for k in 0..len {
                    out[at(k)] = if log { src[at(k)] - max - lz } else { out[at(k)] / z };
                }
            }
        }
        self.push(
            if log { "log_softmax" } else { "softmax" },
            Tensor::from_vec(&shape, out)?,
            &[x],
            Box::new(move |args| {
                let (y, g) = (args.output.data(), args.grad.data());
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        if log {
                            let gs = (0..len).map(|k| g[at(k)]).fold(T::zero(), |a, v| a + v);
                            for k in 0..len {
                                gx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                            }
                        } else {
                            let dot = (0..len).map(|k| g[at(k)] * y[at(k)]).fold(T::zero(), |a, v| a + v);
                            for k in 0..len {
                                gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(args.grad.shape(), gx).expect("same shape"))]
            }),
        )
    }

    /// Picks `x[r, index[r]]` from a `[R, K]` tensor, giving `[R]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[rows, k] = shape.as_slice() else { invalid!("gather_rows: expected 2-D input, got {shape:?}") };
        if index.len() != rows {
            invalid!("gather_rows: {} indices for {rows} rows", index.len());
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            invalid!("gather_rows: index {bad} out of range for {k} columns");
        }
        let src = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &i)| src[r * k + i]).collect();
        let index = index.to_vec();
        self.push(
            "gather_rows",
            Tensor::from_vec(&[rows], data)?,
            &[x],
            Box::new(move |args| {
                let mut gx = Tensor::zeros(&[rows, k]);
                let d = gx.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    d[r * k + i] = args.grad.data()[r];
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
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn log_softmax_matches_ln_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap()).unwrap();
        let s = tape.softmax(x, 1).unwrap();
        let l = tape.log_softmax(x, 1).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(tape.value(l).data()) {
            assert!((a.ln() - b).abs() < 1e-14);
        }
        let c = tape.softmax(x, 0).unwrap();
        let col: f64 = tape.value(c).data()[0] + tape.value(c).data()[3];
        assert!((col - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gather_checks_indices() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let g = tape.gather_rows(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 3.0]);
        assert!(tape.gather_rows(x, &[2, 0]).is_err());
    }
}
