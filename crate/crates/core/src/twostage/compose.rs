use std::fmt;
use std::sync::Arc;

use crate::ad::Tensor;
use crate::dist::{
    check_batch, normal_log_pdf, DiagonalGaussian, QuarticReciprocal, SoftwarePrior, UnnormalizedLogDensity,
};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::real::Real;

use super::spec::{validate_cover, SubvectorSpec};

/// A density term evaluated on the subvector selected by `spec`.
pub struct Component<T: Real> {
    pub spec: SubvectorSpec,
    pub density: Box<dyn UnnormalizedLogDensity<T>>,
}

impl<T: Real> Component<T> {
    pub fn new(spec: SubvectorSpec, density: impl UnnormalizedLogDensity<T> + 'static) -> Self {
        Self {
            spec,
            density: Box::new(density),
        }
    }
}

impl<T: Real> fmt::Debug for Component<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Component")
            .field("spec", &self.spec)
            .field("dim", &self.density.dim())
            .finish()
    }
}

/// User composition on log values: given `log h` and each `log g_i`, returns
/// `log F` and its partial derivatives with respect to `log h` and each `log g_i`.
pub type CustomRule<T> = Arc<dyn Fn(T, &[T]) -> (T, T, Vec<T>) + Send + Sync>;

/// How the fitted components combine with the analytic term.
#[derive(Clone)]
pub enum Combination<T: Real> {
    /// `log h + Σ log g_i`.
    Product,
    /// `log h + log Σ π_i g_i` with weights summing to one.
    Mixture(Vec<f64>),
    Custom(CustomRule<T>),
}

impl<T: Real> fmt::Debug for Combination<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Combination::Product => f.write_str("Product"),
            Combination::Mixture(w) => f.debug_tuple("Mixture").field(w).finish(),
            Combination::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// `log f̃(x) = F(log h(y_0), log g_1(y_1), ..., log g_m(y_m))` with each
/// `y_i` read from `x` through its index set. Overlapping index sets are
/// allowed.
#[derive(Debug)]
pub struct ComposedTarget<T: Real> {
    dim: usize,
    analytic: Option<Component<T>>,
    components: Vec<Component<T>>,
    rule: Combination<T>,
}

/// Checks every index set, dimension and weight, reporting all problems at once.
pub fn compose_target<T: Real>(
    dim: usize,
    analytic: Option<Component<T>>,
    components: Vec<Component<T>>,
    rule: Combination<T>,
) -> Result<ComposedTarget<T>> {
    let mut problems = Vec::new();
    if dim == 0 {
        problems.push("target dimension must be positive".to_string());
    }
    if analytic.is_none() && components.is_empty() {
        problems.push("nothing to compose: no analytic term and no components".to_string());
    }
    for c in analytic.iter().chain(&components) {
        problems.extend(c.spec.problems(dim));
        if c.density.dim() != c.spec.len() {
            problems.push(format!(
                "subvector {}: density has dimension {} but the index set has {}",
                c.spec.name(),
                c.density.dim(),
                c.spec.len()
            ));
        }
    }
    if problems.is_empty() {
        let specs: Vec<&SubvectorSpec> = components.iter().map(|c| &c.spec).collect();
        let a = analytic.as_ref().map_or(&[][..], |c| c.spec.indices());
        if let Err(Error::Spec(p)) = validate_cover(&specs, a, dim) {
            problems.extend(p);
        }
    }
    if let Combination::Mixture(w) = &rule {
        if w.len() != components.len() {
            problems.push(format!(
                "mixture has {} weights for {} components",
                w.len(),
                components.len()
            ));
        }
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            problems.push("mixture weights must be finite and nonnegative".to_string());
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            problems.push(format!("mixture weights sum to {s}, not 1"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Spec(problems));
    }
    Ok(ComposedTarget {
        dim,
        analytic,
        components,
        rule,
    })
}

impl<T: Real> ComposedTarget<T> {
    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    pub fn analytic(&self) -> Option<&Component<T>> {
        self.analytic.as_ref()
    }

    pub fn rule(&self) -> &Combination<T> {
        &self.rule
    }

    fn evaluate(&self, x: &Tensor<T>, want_grad: bool) -> Result<(Vec<T>, Option<Tensor<T>>)> {
        let n = check_batch(x, self.dim)?;
        let d = self.dim;
        let term = |c: &Component<T>| -> Result<(Vec<T>, Option<Tensor<T>>)> {
            let y = x.select_columns(c.spec.indices());
            if want_grad {
                let (v, g) = c.density.log_density_grad(&y)?;
                Ok((v, Some(g)))
            } else {
                Ok((c.density.log_density(&y)?, None))
            }
        };
        let h = self.analytic.as_ref().map(term).transpose()?;
        let gs = self.components.iter().map(term).collect::<Result<Vec<_>>>()?;

        let mut values = Vec::with_capacity(n);
        let mut grad = want_grad.then(|| vec![T::zero(); n * d]);
        let mut logs = vec![T::zero(); gs.len()];
        let mut coef = vec![T::zero(); gs.len()];
        for r in 0..n {
            let lh = h.as_ref().map_or(T::zero(), |(v, _)| v[r]);
            for (k, (v, _)) in gs.iter().enumerate() {
                logs[k] = v[r];
            }
            let (value, ch) = match &self.rule {
                Combination::Product => {
                    coef.iter_mut().for_each(|c| *c = T::one());
                    (logs.iter().fold(lh, |acc, &l| acc + l), T::one())
                }
                Combination::Mixture(w) => {
                    let terms: Vec<T> = logs.iter().zip(w).map(|(&l, &wk)| l + T::c(wk.ln())).collect();
                    let m = terms.iter().copied().fold(T::neg_infinity(), T::max);
                    if m == T::neg_infinity() {
                        coef.iter_mut().for_each(|c| *c = T::zero());
                        (T::neg_infinity(), T::one())
                    } else {
                        let s: T = terms.iter().map(|&t| (t - m).exp()).sum();
                        let lse = m + s.ln();
                        for (c, &t) in coef.iter_mut().zip(&terms) {
                            *c = (t - lse).exp();
                        }
                        (lh + lse, T::one())
                    }
                }
                Combination::Custom(f) => {
                    let (v, dh, dg) = f(lh, &logs);
                    if dg.len() != logs.len() {
                        return Err(Error::Invalid(format!(
                            "custom composition returned {} partials for {} components",
                            dg.len(),
                            logs.len()
                        )));
                    }
                    coef.copy_from_slice(&dg);
                    (v, dh)
                }
            };
            values.push(value);
            if let Some(g) = grad.as_mut() {
                let row = &mut g[r * d..(r + 1) * d];
                let mut scatter = |c: &Component<T>, t: &Tensor<T>, k: T| {
                    if k != T::zero() {
                        for (j, &col) in c.spec.indices().iter().enumerate() {
                            row[col] += k * t.row(r)[j];
                        }
                    }
                };
                if let (Some(c), Some((_, Some(t)))) = (&self.analytic, &h) {
                    scatter(c, t, ch);
                }
                for ((c, (_, t)), &k) in self.components.iter().zip(&gs).zip(&coef) {
                    if let Some(t) = t {
                        scatter(c, t, k);
                    }
                }
            }
        }
        let grad = grad.map(|g| Tensor::matrix(n, d, g)).transpose()?;
        Ok((values, grad))
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for ComposedTarget<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.evaluate(x, false)?.0)
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let (v, g) = self.evaluate(x, true)?;
        Ok((v, g.expect("gradient requested")))
    }
}

/// Analytic factor of the hierarchical posterior over `(θ_1..θ_J, γ)`:
/// `Σ_i [log N(θ_i; γ, τ²) - log P_S(θ_i)]` with a flat prior on `γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchicalH {
    groups: usize,
    tau: f64,
    prior: SoftwarePrior,
}

impl HierarchicalH {
    pub fn new(groups: usize, tau: f64, prior: SoftwarePrior) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Invalid("need at least one group".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
        }
        prior.validate()?;
        Ok(Self { groups, tau, prior })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn prior(&self) -> SoftwarePrior {
        self.prior
    }

    fn row_value<T: Real>(&self, row: &[T]) -> T {
        let (theta, gamma) = row.split_at(self.groups);
        let tau = T::c(self.tau);
        theta
            .iter()
            .map(|&t| normal_log_pdf(t, gamma[0], tau) - self.prior.log_density(t))
            .sum()
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for HierarchicalH {
    fn dim(&self) -> usize {
        self.groups + 1
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let n = check_batch(x, self.groups + 1)?;
        Ok((0..n).map(|r| self.row_value(x.row(r))).collect())
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let n = check_batch(x, self.groups + 1)?;
        let j = self.groups;
        let inv_var = T::c(1.0 / (self.tau * self.tau));
        let mut g = Vec::with_capacity(n * (j + 1));
        for r in 0..n {
            let row = x.row(r);
            let gamma = row[j];
            let mut dg = T::zero();
            for &t in &row[..j] {
                let z = (t - gamma) * inv_var;
                g.push(-z - self.prior.log_density_derivative(t));
                dg += z;
            }
            g.push(dg);
        }
        Ok((self.log_density(x)?, Tensor::matrix(n, j + 1, g)?))
    }
}

/// `log N(x; m_num, s_num²) - log N(x; m_den, s_den²)` coordinatewise; the
/// denominator may be omitted (flat).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRatio<T: Real> {
    numerator: DiagonalGaussian<T>,
    denominator: Option<DiagonalGaussian<T>>,
}

impl<T: Real> GaussianRatio<T> {
    pub fn new(numerator: DiagonalGaussian<T>, denominator: Option<DiagonalGaussian<T>>) -> Result<Self> {
        if let Some(d) = &denominator {
            if d.dim() != numerator.dim() {
                return Err(Error::Dimension {
                    expected: numerator.dim(),
                    got: d.dim(),
                });
            }
        }
        Ok(Self { numerator, denominator })
    }
}

impl<T: Real> UnnormalizedLogDensity<T> for GaussianRatio<T> {
    fn dim(&self) -> usize {
        self.numerator.dim()
    }

    fn log_density(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let a = self.numerator.log_density(x)?;
        match &self.denominator {
            None => Ok(a),
            Some(d) => Ok(a.into_iter().zip(d.log_density(x)?).map(|(p, q)| p - q).collect()),
        }
    }

    fn log_density_grad(&self, x: &Tensor<T>) -> Result<(Vec<T>, Tensor<T>)> {
        let (a, mut ga) = self.numerator.log_density_grad(x)?;
        match &self.denominator {
            None => Ok((a, ga)),
            Some(d) => {
                let (b, gb) = d.log_density_grad(x)?;
                ga.data_mut().iter_mut().zip(gb.data()).for_each(|(p, q)| *p -= *q);
                Ok((a.into_iter().zip(b).map(|(p, q)| p - q).collect(), ga))
            }
        }
    }
}

/// `log ĝ(θ) + log h(θ, γ)` over `(θ_1..θ_J, γ)` for a Stage-1 model `ĝ` of
/// the software draws.
pub fn hierarchical_composition<T: Real>(
    ghat: FlowModel<T>,
    tau: f64,
    prior: SoftwarePrior,
) -> Result<ComposedTarget<T>> {
    let j = ghat.dim();
    let h = HierarchicalH::new(j, tau, prior)?;
    compose_target(
        j + 1,
        Some(Component::new(SubvectorSpec::new("h", (0..=j).collect()), h)),
        vec![Component::new(SubvectorSpec::new("theta", (0..j).collect()), ghat)],
        Combination::Product,
    )
}

/// `log ĝ₁(x, y) + log ĝ₂(x, z) - log f(x)` over `(x, y, z)`.
pub fn joint_composition<T: Real>(g1: FlowModel<T>, g2: FlowModel<T>) -> Result<ComposedTarget<T>> {
    joint_composition_with(g1, g2, QuarticReciprocal)
}

/// As [`joint_composition`] with a caller-supplied term on `x`.
pub fn joint_composition_with<T: Real>(
    g1: FlowModel<T>,
    g2: FlowModel<T>,
    h: impl UnnormalizedLogDensity<T> + 'static,
) -> Result<ComposedTarget<T>> {
    compose_target(
        3,
        Some(Component::new(SubvectorSpec::new("h", vec![0]), h)),
        vec![
            Component::new(SubvectorSpec::new("xy", vec![0, 1]), g1),
            Component::new(SubvectorSpec::new("xz", vec![0, 2]), g2),
        ],
        Combination::Product,
    )
}
