use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives one bound variable per entry of `params` (in order) and must
/// return a scalar. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_gradcheck<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if eps <= T::zero() {
        return Err(Error::Invalid("gradcheck step must be positive".into()));
    }
    let analytic: Vec<Vec<T>> = {
        let tape = Tape::new();
        let vars = params
            .iter()
            .map(|p| tape.leaf(&p.clone().with_grad()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| grads.wrt(*v).map(<[T]>::to_vec).unwrap_or_default())
            .collect()
    };

    let eval = |ps: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let v = f(&tape, &vars)?.scalar_value();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "gradcheck" })
        }
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (eps + eps);
            let a = analytic[pi].get(k).copied().unwrap_or_else(T::zero);
            let err = (a - numeric).abs() / numeric.abs().max(T::one());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
