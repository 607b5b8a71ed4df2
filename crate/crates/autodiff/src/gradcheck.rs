//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates compared; all of them when the parameter count is smaller.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, samples: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub pass: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Gradient check over an arbitrary evaluator.
///
/// `eval(theta, true)` must return the scalar objective and its analytic
/// gradient (one tensor per entry of `theta`); `eval(theta, false)` only the
/// objective.
pub fn grad_check_with<F>(mut eval: F, theta: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let (f0, grads) = eval(theta, true)?;
    let grads = grads.ok_or_else(|| Error::Contract("evaluator returned no gradient".into()))?;
    if grads.len() != theta.len() || grads.iter().zip(theta).any(|(g, t)| g.shape() != t.shape()) {
        return Err(Error::Contract("gradient shapes do not match parameters".into()));
    }
    let (f1, _) = eval(theta, false)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Contract(format!("objective is not deterministic: {f0} vs {f1}")));
    }

    let sizes: Vec<usize> = theta.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<usize> =
        if total <= cfg.samples { (0..total).collect() } else { sample(&mut rng, total, cfg.samples).into_vec() };
    coords.sort_unstable();

    let mut work: Vec<Tensor<f64>> = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, pass: true };
    for flat in coords {
        let (mut ti, mut ci) = (0, flat);
        while ci >= sizes[ti] {
            ci -= sizes[ti];
            ti += 1;
        }
        let orig = work[ti].data()[ci];
        work[ti].data_mut()[ci] = orig + cfg.eps;
        let (fp, _) = eval(&work, false)?;
        work[ti].data_mut()[ci] = orig - cfg.eps;
        let (fm, _) = eval(&work, false)?;
        work[ti].data_mut()[ci] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let analytic = grads[ti].data()[ci];
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((ti, ci, analytic, numeric));
        }
    }
    report.pass = report.max_rel_error <= cfg.tol;
    Ok(report)
}

/// Gradient check of a scalar function built on a fresh 64-bit tape. Each
/// entry of `theta` becomes a leaf requiring gradients.
pub fn grad_check<F>(build: F, theta: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        |params, want_grad| {
            let mut tape = Tape::new();
            let vars = params.iter().map(|p| tape.param(p.clone())).collect::<Result<Vec<_>>>()?;
            let out = build(&mut tape, &vars)?;
            if tape.value(out).numel() != 1 {
                return Err(Error::InvalidArgument("grad_check objective must be scalar".into()));
            }
            let value = tape.value(out).item();
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(out)?;
            let grads = vars
                .iter()
                .zip(params)
                .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            Ok((value, Some(grads)))
        },
        theta,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let theta = [Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()];
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum_all(sq)
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert!(report.pass);
    }

    #[test]
    fn nondeterminism_is_a_contract_violation() {
        let theta = [Tensor::from_f64(&[1], &[1.0]).unwrap()];
        let mut calls = 0.0;
        let err = grad_check_with(
            |p, want| {
                calls += 1.0;
                let v = p[0].item() + calls;
                Ok((v, want.then(|| vec![Tensor::scalar(1.0)])))
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn wrong_gradient_fails() {
        let theta = [Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap()];
        let report = grad_check_with(
            |p, want| {
                let v: f64 = p[0].data().iter().map(|x| x * x).sum();
                Ok((v, want.then(|| vec![p[0].map(|x| 3.0 * x)])))
            },
            &theta,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.pass);
        assert!((report.max_rel_error - 0.2).abs() < 1e-6);
    }
}
