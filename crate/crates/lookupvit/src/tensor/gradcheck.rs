//! Finite-difference gradient checking.
//!
//! Independent numerical oracle for the tape's backward pass: central
//! differences in f64 with a caller-chosen step, evaluated by re-running a
//! loss closure on perturbed inputs. Large tensors are checked on a random
//! subsample of coordinates to bound runtime.

use super::Tensor;
use crate::rng::SplitMix64;
use crate::Result;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Relative-error gate used by the acceptance checks.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled per tensor when it is larger than this.
pub const DEFAULT_MAX_COORDS: usize = 1000;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, flat coordinate, analytic, numeric) of the worst spot.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with a small-denominator floor so near-zero gradients are
/// compared absolutely at 1e-6 scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients against central differences of `loss`.
///
/// `loss` must be a pure function of `inputs`; it is re-evaluated twice per
/// checked coordinate. `analytic[i]` may be `None` for inputs that do not
/// require gradients.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    analytic: &[Option<Tensor<f64>>],
    mut loss: F,
    step: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rng = SplitMix64::new(seed);
    let mut report =
        GradCheckReport { coords_checked: 0, max_rel_err: 0.0, worst: None };

    for (ti, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let n = inputs[ti].len();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            (0..max_coords_per_tensor).map(|_| rng.below(n)).collect()
        };
        for &c in &coords {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + step;
            let up = loss(&work)?;
            work[ti].data_mut()[c] = orig - step;
            let down = loss(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, c, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn quadratic_loss_gradient_is_checked() {
        // loss = 0.5 * ||x||^2 has gradient exactly x.
        let x = Tensor::<f64>::from_f64s(vec![4], &[0.5, -1.5, 2.0, 3.0]).unwrap();
        let analytic = Some(x.clone());
        let report = check_gradients(
            std::slice::from_ref(&x),
            &[analytic],
            |inputs| {
                let mut tape = Tape::new();
                let v = tape.leaf(inputs[0].clone(), true);
                let sq = tape.mul(v, v)?;
                let s = tape.sum(sq)?;
                let l = tape.scale(s, 0.5)?;
                Ok(tape.value(l).data()[0])
            },
            DEFAULT_STEP,
            DEFAULT_MAX_COORDS,
            7,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::<f64>::from_f64s(vec![2], &[1.0, 2.0]).unwrap();
        let wrong = Some(Tensor::<f64>::from_f64s(vec![2], &[9.0, 9.0]).unwrap());
        let report = check_gradients(
            std::slice::from_ref(&x),
            &[wrong],
            |inputs| Ok(inputs[0].data().iter().sum()),
            DEFAULT_STEP,
            DEFAULT_MAX_COORDS,
            7,
        )
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn subsampling_bounds_work() {
        let x = Tensor::<f64>::zeros(vec![50]);
        let g = Some(Tensor::<f64>::zeros(vec![50]));
        let report = check_gradients(
            std::slice::from_ref(&x),
            &[g],
            |inputs| Ok(inputs[0].data().iter().sum()),
            DEFAULT_STEP,
            10,
            7,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 10);
        // zero-gradient claim against sum(x) must fail: true grad is 1.
        assert!(!report.passes(DEFAULT_TOLERANCE));
    }
}
