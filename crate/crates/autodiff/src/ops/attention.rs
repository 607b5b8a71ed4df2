use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};

/// Result of [`Tape::scaled_dot_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[B, T, dv]`, heads concatenated along the last axis.
    pub output: Var,
    /// `[B * heads, T, S]`, each row a probability vector.
    pub weights: Var,
}

impl<T: Element> Tape<T> {
    /// `[B, T, d] -> [B * heads, T, d / heads]`
    fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let r = self.reshape(x, &[b, t, heads, d / heads])?;
        let p = self.permute(r, &[0, 2, 1, 3])?;
        self.reshape(p, &[b * heads, t, d / heads])
    }

    /// Multi-head `softmax(Q K^T / sqrt(d_head)) V` without projections.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Attention> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let (&[b, t, dk], &[bk, s, dk2], &[bv, s2, dv]) = (qs.as_slice(), ks.as_slice(), vs.as_slice()) else {
            invalid!("attention: Q, K, V must be 3-D, got {qs:?}, {ks:?}, {vs:?}");
        };
        if b != bk || b != bv || dk != dk2 || s != s2 {
            invalid!("attention: incompatible Q {qs:?}, K {ks:?}, V {vs:?}");
        }
        if heads == 0 || dk % heads != 0 || dv % heads != 0 {
            invalid!("attention: dims dk={dk}, dv={dv} not divisible by {heads} heads");
        }
        let qh = self.split_heads(q, heads)?;
        let kh = self.split_heads(k, heads)?;
        let vh = self.split_heads(v, heads)?;
        let scores = self.bmm(qh, kh, false, true)?;
        let scaled = self.scale(scores, 1.0 / ((dk / heads) as f64).sqrt())?;
        let weights = self.softmax(scaled, 2)?;
        let ctx = self.bmm(weights, vh, false, false)?;
        let ctx = self.reshape(ctx, &[b, heads, t, dv / heads])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let output = self.reshape(ctx, &[b, t, dv])?;
        Ok(Attention { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn hand_evaluated_two_tokens() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 1.0]).unwrap()).unwrap();
        let k = tape.constant(Tensor::from_f64(&[1, 2, 1], &[0.0, 4f64.ln()]).unwrap()).unwrap();
        let v = tape.constant(Tensor::from_f64(&[1, 2, 1], &[0.0, 1.0]).unwrap()).unwrap();
        let a = tape.scaled_dot_attention(q, k, v, 1).unwrap();
        let w = tape.value(a.weights).data();
        for (got, want) in w.iter().zip([0.2, 0.8, 0.2, 0.8]) {
            assert!((got - want).abs() < 1e-12);
        }
        for got in tape.value(a.output).data() {
            assert!((got - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        let k = tape.constant(Tensor::from_f64(&[1, 1, 4], &[1.0, 1.0, -1.0, 0.0]).unwrap()).unwrap();
        let v = tape.constant(Tensor::from_f64(&[1, 1, 4], &[9.0, 8.0, 7.0, 6.0]).unwrap()).unwrap();
        let a = tape.scaled_dot_attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(a.output).data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, -3.0, 0.5, 0.0, 7.0]).unwrap()).unwrap();
        let k = tape.constant(Tensor::full(&[1, 3, 2], 0.7)).unwrap();
        let v = tape.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let a = tape.scaled_dot_attention(q, k, v, 1).unwrap();
        for w in tape.value(a.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_must_divide() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 6])).unwrap();
        assert!(tape.scaled_dot_attention(q, q, q, 4).is_err());
    }
}
