//! Central finite-difference checks for analytic gradients.

use thiserror::Error;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max_k |analytic_k - fd_k| / max(1, |fd_k|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub num_checked: usize,
}

/// A perturbation moved the evaluation onto a different smooth piece
/// (ReLU or max-pool switch); the instance should be re-sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("perturbation of parameter {index} crossed a kink")]
pub struct KinkCrossed {
    pub index: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` against central differences of `f` with step `step`.
pub fn finite_difference_check<F>(mut f: F, params: &[f64], analytic: &[f64], step: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        num_checked: params.len(),
    };
    for k in 0..params.len() {
        probe[k] = params[k] + step;
        let plus = f(&probe);
        probe[k] = params[k] - step;
        let minus = f(&probe);
        probe[k] = params[k];
        let err = rel_error(analytic[k], (plus - minus) / (2.0 * step));
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = k;
        }
    }
    report
}

/// Like [`finite_difference_check`], but `f` also returns an activation
/// signature; any perturbation that changes it aborts the check.
pub fn finite_difference_check_guarded<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<FdReport, KinkCrossed>
where
    F: FnMut(&[f64]) -> (f64, u64),
{
    let (_, base_sig) = f(params);
    let mut crossed = None;
    let report = finite_difference_check(
        |p| {
            let (loss, sig) = f(p);
            if sig != base_sig && crossed.is_none() {
                let index = p
                    .iter()
                    .zip(params)
                    .position(|(a, b)| a != b)
                    .unwrap_or(0);
                crossed = Some(KinkCrossed { index });
            }
            loss
        },
        params,
        analytic,
        step,
    );
    match crossed {
        Some(k) => Err(k),
        None => Ok(report),
    }
}
