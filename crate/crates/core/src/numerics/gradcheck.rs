use super::{ParamGrads, ParamStore, TensorError};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Denominator floor for relative errors. Central differences with
/// `eps = 1e-5` carry round-off near `1e-11` for O(1) losses, which would
/// otherwise dominate coordinates whose true gradient is exactly zero
/// (attention key biases, for one).
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Checks the analytic gradient of `f` at the current parameter values
/// against central differences with step `eps`, over every coordinate of
/// every trainable parameter.
///
/// `f` must return the scalar value and the reverse-mode parameter
/// gradients. Parameter values are restored before returning.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamGrads), TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidEpsilon(eps));
    }
    let (_, analytic) = f(store)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, coordinates: 0 };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable()).collect();
    for id in ids {
        let n = store.get(id).value().len();
        for i in 0..n {
            let orig = store.get(id).value().data()[i];
            store.get_mut(id).value_mut().data_mut()[i] = orig + eps;
            let (plus, _) = f(store)?;
            store.get_mut(id).value_mut().data_mut()[i] = orig - eps;
            let (minus, _) = f(store)?;
            store.get_mut(id).value_mut().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_ERROR_FLOOR);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.get(id).name().to_string(), i));
                }
            }
        }
    }
    Ok(report)
}
