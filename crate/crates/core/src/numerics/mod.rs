//! Deterministic numerical substrate shared by every other module.

mod adamw;
mod matrix;
mod rng;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use matrix::{dot, norm, squared_distance, Mat64, Vec64};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Probability floor used by [`cross_entropy`]; a zero probability costs
/// `-ln(1e-12) ≈ 27.6` instead of infinity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec64 = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `-ln probs[label]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFinite("probabilities"));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Mean cross-entropy of row-wise softmax over `logits` against `labels`,
/// with the gradient with respect to the logits, `(softmax − onehot) / n`.
///
/// The gradient ignores the probability floor, so it is exact whenever every
/// true-class probability exceeds [`PROB_FLOOR`].
pub fn batch_cross_entropy(logits: &Mat64, labels: &[usize]) -> Result<(f64, Mat64)> {
    if logits.rows() == 0 {
        return Err(Error::EmptyInput("cross-entropy batch"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::LengthMismatch {
            what: "cross-entropy labels",
            expected: logits.rows(),
            got: labels.len(),
        });
    }
    let n = logits.rows() as f64;
    let mut grad = Mat64::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let p = softmax(logits.row(r))?;
        total += cross_entropy(&p, label)?;
        let g = grad.row_mut(r);
        for (gi, pi) in g.iter_mut().zip(&p) {
            *gi = pi / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((total / n, grad))
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
    pub numeric: Vec64,
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
/// `loss` is evaluated twice at `params` first; differing results are
/// reported as [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "analytic gradient",
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let base = loss(params);
    if base.to_bits() != loss(params).to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&probe);
        probe[i] = orig - h;
        let down = loss(&probe);
        probe[i] = orig;
        let n = (up - down) / (2.0 * h);
        if !n.is_finite() {
            return Err(Error::NonFinite("finite-difference gradient"));
        }
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (v, e) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(softmax(&[0.0, f64::INFINITY]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let rest = (1.0 - 1.0 / e) / 2.0;
        assert!((cross_entropy(&[1.0 / e, rest, rest], 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - (-(1e-12f64).ln())).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let r = finite_diff_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8);
        let r = finite_diff_check(|p| p[0] * p[0], &[3.0], &[6.6], 1e-5).unwrap();
        assert!((r.max_rel_error - 0.6 / 6.6).abs() < 1e-6);
        let r = finite_diff_check(|_| 4.0, &[1.0, 2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-12);
    }

    #[test]
    fn finite_diff_detects_non_determinism() {
        let calls = std::cell::Cell::new(0u32);
        let f = |p: &[f64]| {
            calls.set(calls.get() + 1);
            p[0] + f64::from(calls.get())
        };
        assert!(matches!(finite_diff_check(f, &[1.0], &[1.0], 1e-5), Err(Error::NonDeterministic)));
        assert!(finite_diff_check(|p| p[0], &[1.0], &[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_on_the_simplex(v in proptest::collection::vec(-1e6f64..1e6, 1..32)) {
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            let arg = |xs: &[f64]| xs.iter().enumerate().fold(0, |b, (i, x)| if *x > xs[b] { i } else { b });
            prop_assert_eq!(arg(&v), arg(&p));
        }
    }
}
