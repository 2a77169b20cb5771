//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over kept coordinates of |analytic - central| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub worst_coord: usize,
    /// Coordinates where the two one-sided differences disagree, i.e. the
    /// function is not smooth there (ReLU kinks). They carry no meaningful
    /// central difference and are excluded from the max.
    pub skipped: Vec<usize>,
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks the tape gradient of a scalar-valued `f` at `x` against central
/// differences with step `h`. `f` must be deterministic; it is re-evaluated
/// with perturbed detached copies of `x`, so only the dependence on the
/// explicit `x` argument is checked.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor, TensorError>,
{
    let eval = |values: &[f64]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), values.to_vec())?;
        let out = f(&tape, &t)?;
        if !out.is_scalar() {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let out = f(&tape, &leaf)?;
    if !out.is_scalar() {
        return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
    }
    let f0 = out.item();
    let grads = tape.backward(&out)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    let analytic = grads.for_tensor(&leaf).unwrap_or(&zero);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        skipped: vec![],
    };
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;

        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > 0.02 * fwd.abs().max(bwd.abs()).max(1.0) {
            report.skipped.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.values()[i];
        let rel = (a - central).abs() / a.abs().max(1.0);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let report = finite_difference_check(|tape, x| tape.sum(x, None), &x, 1e-5).unwrap();
        assert!(report.skipped.is_empty());
        assert!(report.max_rel_err <= 1e-10, "err {}", report.max_rel_err);
    }

    #[test]
    fn squared_norm_gradient_on_random_input() {
        let mut rng = SeedStream::new(7);
        let values: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let x = Tensor::new(vec![8], values).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum(&sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-7, "err {}", report.max_rel_err);
    }

    #[test]
    fn relu_kink_coordinate_is_skipped() {
        // x[1] sits exactly on the kink; its one-sided slopes are 0 and 1.
        let x = Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let r = tape.relu(x)?;
                tape.sum(&r, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, vec![1]);
        assert!(report.max_rel_err <= 1e-9);
    }

    #[test]
    fn corrupted_derivative_is_reported() {
        // Negative control: an off-by-2x "analytic" gradient must show a
        // large relative error against the true numeric one.
        let analytic = [2.0, -4.0, 6.0];
        let numeric = [1.0, -2.0, 3.0];
        assert!(max_rel_error(&analytic, &numeric) > 0.4);
    }

    #[test]
    fn composed_elementwise_chain_passes() {
        let mut rng = SeedStream::new(13);
        let values: Vec<f64> = (0..6).map(|_| rng.uniform(-1.5, 1.5)).collect();
        let x = Tensor::new(vec![6], values).unwrap();
        let report = finite_difference_check(
            |tape, x| {
                let a = tape.tanh(x)?;
                let b = tape.sigmoid(&a)?;
                let c = tape.exp(&b)?;
                tape.mean(&c, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-7, "err {}", report.max_rel_err);
    }
}
