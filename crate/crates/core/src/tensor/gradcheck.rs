use super::{Grads, ParamStore, Scalar};
use crate::error::{Error, Result};

/// Compares analytic gradients returned by `f` against central differences.
///
/// `f` maps parameters to `(loss, gradients)`. The result is the maximum over
/// all parameter entries of `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<S, F>(f: F, params: &mut ParamStore<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&ParamStore<S>) -> (S, Grads<S>),
{
    let (base, analytic) = f(params);
    let (again, _) = f(params);
    if base.as_f64().to_bits() != again.as_f64().to_bits() {
        return Err(Error::Check(format!(
            "function is not deterministic ({base} vs {again})"
        )));
    }
    if !base.is_finite() {
        return Err(Error::Check("loss is not finite".into()));
    }
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for i in 0..params.tensors()[p].len() {
            let orig = params.tensors()[p].data()[i];
            params.tensors_mut()[p].data_mut()[i] = orig + S::lit(eps);
            let (plus, _) = f(params);
            params.tensors_mut()[p].data_mut()[i] = orig - S::lit(eps);
            let (minus, _) = f(params);
            params.tensors_mut()[p].data_mut()[i] = orig;
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * eps);
            let a = analytic.bufs()[p][i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
