use crate::ad::{Tensor, Var};
use crate::dist::UnnormalizedLogDensity;
use crate::error::{Error, Result};
use crate::flow::BoundFlow;
use crate::real::Real;
use crate::rng::Rng;

/// Log-density value substituted where the target is `-inf`.
pub const TARGET_FLOOR: f64 = -1e9;

fn is_numeric(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } | Error::Domain { .. } | Error::NonFiniteLoss { .. } => true,
        Error::Layer { source, .. } => is_numeric(source),
        _ => false,
    }
}

pub(crate) fn is_non_finite_step(e: &Error) -> bool {
    is_numeric(e) || matches!(e, Error::NonFiniteGradient { .. })
}

/// `-(1/N) Σ log q(x_n)`: the Monte Carlo forward KL up to the entropy of
/// the data distribution.
pub fn forward_kl_loss<'t, T: Real>(flow: &BoundFlow<'t, '_, T>, batch: &Tensor<T>) -> Result<Var<'t, T>> {
    if batch.shape().len() != 2 || batch.rows() == 0 {
        return Err(Error::Invalid("forward KL needs a nonempty N x D batch".into()));
    }
    let x = flow.tape().constant(batch.clone())?;
    let loss = flow.log_prob(x).and_then(|lp| lp.mean(0)?.neg());
    match loss {
        Err(e) if is_numeric(&e) => Err(locate_bad_row(flow, batch).unwrap_or(e)),
        other => other,
    }
}

fn locate_bad_row<T: Real>(flow: &BoundFlow<'_, '_, T>, batch: &Tensor<T>) -> Option<Error> {
    let model = flow.model();
    (0..batch.rows()).find_map(|r| match model.log_prob(&batch.slice_rows(r, r + 1)) {
        Ok(v) if v[0].is_finite() => None,
        _ => Some(Error::NonFiniteLoss { sample: r }),
    })
}

/// `(1/n) Σ [log f_U(u_n) - log|det J_T(u_n)| - log f(T(u_n))]` for base
/// draws `u`. The target enters through its values and input gradients, so
/// parameter gradients flow through `T` only.
pub fn reverse_kl_loss<'t, T: Real>(
    flow: &BoundFlow<'t, '_, T>,
    target: &dyn UnnormalizedLogDensity<T>,
    u: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let model = flow.model();
    if target.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: target.dim(),
        });
    }
    if u.shape().len() != 2 || u.rows() == 0 {
        return Err(Error::Invalid("reverse KL needs at least one base draw".into()));
    }
    let uv = flow.tape().constant(u.clone())?;
    let (x, logdet) = flow.forward(uv)?;
    let (mut values, mut grad) = target.log_density_grad(&x.to_tensor())?;
    let d = model.dim();
    for (r, v) in values.iter_mut().enumerate() {
        if v.is_nan() {
            return Err(Error::TargetNaN { sample: r });
        }
        if *v == T::neg_infinity() {
            *v = T::c(TARGET_FLOOR);
            grad.data_mut()[r * d..(r + 1) * d]
                .iter_mut()
                .for_each(|g| *g = T::zero());
        } else if !v.is_finite() || grad.row(r).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { sample: r });
        }
    }
    let log_target = x.row_fn(values, grad.into_data())?;
    model.base().log_prob_on(uv)?.sub(logdet)?.sub(log_target)?.mean(0)
}

/// [`reverse_kl_loss`] with `n` fresh base draws.
pub fn reverse_kl_loss_mc<'t, T: Real>(
    flow: &BoundFlow<'t, '_, T>,
    target: &dyn UnnormalizedLogDensity<T>,
    n: usize,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    if n == 0 {
        return Err(Error::Invalid("n_mc must be at least 1".into()));
    }
    let u = flow.model().base().sample(n, rng);
    reverse_kl_loss(flow, target, &u)
}
