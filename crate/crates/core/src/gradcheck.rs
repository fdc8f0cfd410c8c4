//! Central-difference verification of analytic gradients.

use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_EPS: f64 = 1e-6;

/// Compares the analytic gradient returned by `f` at `params` against
/// central differences `(f(θ+h·e) − f(θ−h·e)) / 2h` for every coordinate and
/// returns the largest `|analytic − numeric| / (|analytic| + |numeric| + ε)`.
///
/// `f` returns the scalar value and one gradient tensor per parameter.
pub fn grad_check<F, E>(params: &[Tensor], h: f64, mut f: F) -> Result<f64, E>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>), E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(params)?;
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), params[pi].shape());
        for j in 0..params[pi].numel() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let (plus, _) = f(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let (minus, _) = f(&work)?;
            work[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + REL_EPS);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
