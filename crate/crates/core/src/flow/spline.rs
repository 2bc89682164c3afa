//! Monotone rational-quadratic splines and the autoregressive layer built on them.

use serde::{Deserialize, Serialize};

use crate::ad::{softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

use super::mlp::Mlp;
use super::row_constant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_width: f64,
    pub min_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 5.0,
            min_width: 1e-3,
            min_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.bins as f64;
        if self.bins == 0
            || !(self.tail_bound > 0.0)
            || !(self.min_width > 0.0 && self.min_width * k < 1.0)
            || !(self.min_height > 0.0 && self.min_height * k < 1.0)
            || !(self.min_derivative > 0.0 && self.min_derivative < 1.0)
        {
            return Err(Error::Invalid(format!("invalid spline configuration {self:?}")));
        }
        Ok(())
    }

    /// Unnormalized parameters per coordinate: `K` widths, `K` heights and
    /// `K - 1` interior derivatives.
    pub fn n_params(&self) -> usize {
        3 * self.bins - 1
    }

    /// Offset making a zero derivative parameter map to slope one.
    fn derivative_offset(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }
}

struct Knots<T> {
    cw: Vec<T>,
    ch: Vec<T>,
    d: Vec<T>,
}

fn softmax_widths<T: Real>(raw: &[T], min: f64, span: f64) -> Vec<T> {
    let m = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = raw.iter().map(|&r| (r - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    let k = raw.len() as f64;
    e.iter()
        .map(|&v| (T::c(min) + T::c(1.0 - min * k) * v / z) * T::c(span))
        .collect()
}

fn knots<T: Real>(raw: &[T], cfg: &SplineConfig) -> Knots<T> {
    let k = cfg.bins;
    let b = T::c(cfg.tail_bound);
    let span = 2.0 * cfg.tail_bound;
    let cumulative = |w: Vec<T>| {
        let mut c = vec![-b];
        for wi in w {
            let last = *c.last().expect("nonempty");
            c.push(last + wi);
        }
        c
    };
    let cw = cumulative(softmax_widths(&raw[..k], cfg.min_width, span));
    let ch = cumulative(softmax_widths(&raw[k..2 * k], cfg.min_height, span));
    let off = T::c(cfg.derivative_offset());
    let mut d = vec![T::one()];
    d.extend(
        raw[2 * k..]
            .iter()
            .map(|&r| T::c(cfg.min_derivative) + softplus(r + off)),
    );
    d.push(T::one());
    Knots { cw, ch, d }
}

/// Index of the bin of `edges` (length `K + 1`) containing `v`.
fn search<T: Real>(edges: &[T], v: T) -> usize {
    let k = edges.len() - 1;
    edges[1..k].iter().filter(|&&e| e <= v).count()
}

/// Evaluates one spline at `u` from its `3K - 1` unnormalized parameters.
/// Returns the output and `log dx/du`; outside `[-B, B]` the map is the
/// identity.
pub fn rq_spline_eval<T: Real>(raw: &[T], u: T, cfg: &SplineConfig) -> (T, T) {
    let b = T::c(cfg.tail_bound);
    if u < -b || u > b {
        return (u, T::zero());
    }
    let kn = knots(raw, cfg);
    let i = search(&kn.cw, u);
    let (w, h) = (kn.cw[i + 1] - kn.cw[i], kn.ch[i + 1] - kn.ch[i]);
    let s = h / w;
    let (d0, d1) = (kn.d[i], kn.d[i + 1]);
    let xi = (u - kn.cw[i]) / w;
    let xom = xi * (T::one() - xi);
    let den = s + (d1 + d0 - s - s) * xom;
    let x = kn.ch[i] + h * (s * xi * xi + d0 * xom) / den;
    let dnum = d1 * xi * xi + (s + s) * xom + d0 * (T::one() - xi) * (T::one() - xi);
    let dlog = (s * s * dnum / (den * den)).ln();
    (x, dlog)
}

/// Inverse of [`rq_spline_eval`]; returns `u` and `log du/dx`.
pub fn rq_spline_inverse<T: Real>(raw: &[T], x: T, cfg: &SplineConfig) -> (T, T) {
    let b = T::c(cfg.tail_bound);
    if x < -b || x > b {
        return (x, T::zero());
    }
    let kn = knots(raw, cfg);
    let i = search(&kn.ch, x);
    let (w, h) = (kn.cw[i + 1] - kn.cw[i], kn.ch[i + 1] - kn.ch[i]);
    let s = h / w;
    let (d0, d1) = (kn.d[i], kn.d[i + 1]);
    let dx = x - kn.ch[i];
    let sum = d1 + d0 - s - s;
    let a = h * (s - d0) + dx * sum;
    let bb = h * d0 - dx * sum;
    let c = -s * dx;
    let disc = bb * bb - T::c(4.0) * a * c;
    let xi = (c + c) / (-bb - disc.sqrt());
    let u = xi * w + kn.cw[i];
    let (_, dlog) = rq_spline_eval(raw, u, cfg);
    (u, -dlog)
}

struct TapeKnots<'t, T: Real> {
    w: Var<'t, T>,
    cw: Var<'t, T>,
    h: Var<'t, T>,
    ch: Var<'t, T>,
    d: Var<'t, T>,
}

fn knots_on<'t, T: Real>(raw: Var<'t, T>, cfg: &SplineConfig) -> Result<TapeKnots<'t, T>> {
    let tape = raw.tape();
    let n = raw.shape()[0];
    let k = cfg.bins;
    let span = 2.0 * cfg.tail_bound;
    let mut upper = vec![T::zero(); k * (k + 1)];
    for r in 0..k {
        for c in r + 1..=k {
            upper[r * (k + 1) + c] = T::one();
        }
    }
    let upper = tape.constant(Tensor::matrix(k, k + 1, upper)?)?;
    let bins = |start: usize, min: f64| -> Result<(Var<'t, T>, Var<'t, T>)> {
        let w = raw
            .slice(1, start, start + k)?
            .softmax(1)?
            .scale(T::c((1.0 - min * k as f64) * span))?
            .add_scalar(T::c(min * span))?;
        let c = w.matmul(upper)?.add_scalar(T::c(-cfg.tail_bound))?;
        Ok((w, c))
    };
    let (w, cw) = bins(0, cfg.min_width)?;
    let (h, ch) = bins(k, cfg.min_height)?;
    let interior = raw
        .slice(1, 2 * k, 3 * k - 1)?
        .add_scalar(T::c(cfg.derivative_offset()))?
        .softplus()?
        .add_scalar(T::c(cfg.min_derivative))?;
    let ones = tape.constant(Tensor::full(&[n, 1], T::one()))?;
    let d = tape.concat(&[ones, interior, ones], 1)?;
    Ok(TapeKnots { w, cw, h, ch, d })
}

struct Bin<'t, T: Real> {
    w: Var<'t, T>,
    cw: Var<'t, T>,
    h: Var<'t, T>,
    ch: Var<'t, T>,
    d0: Var<'t, T>,
    d1: Var<'t, T>,
    s: Var<'t, T>,
}

fn pick<'t, T: Real>(kn: &TapeKnots<'t, T>, idx: &[usize]) -> Result<Bin<'t, T>> {
    let next: Vec<usize> = idx.iter().map(|i| i + 1).collect();
    let w = kn.w.gather(idx)?;
    let h = kn.h.gather(idx)?;
    Ok(Bin {
        w,
        cw: kn.cw.gather(idx)?,
        h,
        ch: kn.ch.gather(idx)?,
        d0: kn.d.gather(idx)?,
        d1: kn.d.gather(&next)?,
        s: h.div(w)?,
    })
}

/// `log dx/du` at bin coordinate `xi`.
fn log_slope<'t, T: Real>(bin: &Bin<'t, T>, xi: Var<'t, T>) -> Result<Var<'t, T>> {
    let om = xi.one_minus()?;
    let xom = xi.mul(om)?;
    let den = bin.d1.add(bin.d0)?.sub(bin.s.scale(T::c(2.0))?)?.mul(xom)?.add(bin.s)?;
    let dnum = bin
        .d1
        .mul(xi.square()?)?
        .add(bin.s.scale(T::c(2.0))?.mul(xom)?)?
        .add(bin.d0.mul(om.square()?)?)?;
    bin.s
        .log()?
        .scale(T::c(2.0))?
        .add(dnum.log()?)?
        .sub(den.log()?.scale(T::c(2.0))?)
}

/// Row masks and bin indices; rows outside the tails are evaluated at zero
/// and then replaced by the identity.
fn locate<T: Real>(v: &[T], edges: &[T], k: usize, bound: T) -> (Vec<bool>, Vec<usize>) {
    let inside: Vec<bool> = v.iter().map(|&x| x >= -bound && x <= bound).collect();
    let idx = v
        .iter()
        .zip(&inside)
        .enumerate()
        .map(|(r, (&x, &ins))| {
            let at = if ins { x } else { T::zero() };
            search(&edges[r * (k + 1)..(r + 1) * (k + 1)], at)
        })
        .collect();
    (inside, idx)
}

/// Batched spline on the tape: `raw` is `N x (3K-1)`, `u` has length `N`.
pub fn rq_forward_on<'t, T: Real>(
    raw: Var<'t, T>,
    u: Var<'t, T>,
    cfg: &SplineConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = raw.tape();
    let kn = knots_on(raw, cfg)?;
    let (inside, idx) = kn
        .cw
        .with_value(|cw| u.with_value(|uv| locate(uv, cw, cfg.bins, T::c(cfg.tail_bound))));
    let zeros = row_constant(raw)?;
    let u_in = tape.select(&inside, u, zeros)?;
    let bin = pick(&kn, &idx)?;
    let xi = u_in.sub(bin.cw)?.div(bin.w)?;
    let xom = xi.mul(xi.one_minus()?)?;
    let den = bin.d1.add(bin.d0)?.sub(bin.s.scale(T::c(2.0))?)?.mul(xom)?.add(bin.s)?;
    let num = bin.h.mul(bin.s.mul(xi.square()?)?.add(bin.d0.mul(xom)?)?)?;
    let x = bin.ch.add(num.div(den)?)?;
    let dlog = log_slope(&bin, xi)?;
    Ok((tape.select(&inside, x, u)?, tape.select(&inside, dlog, zeros)?))
}

/// Batched inverse; returns `u` and `log du/dx`.
pub fn rq_inverse_on<'t, T: Real>(
    raw: Var<'t, T>,
    x: Var<'t, T>,
    cfg: &SplineConfig,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = raw.tape();
    let kn = knots_on(raw, cfg)?;
    let (inside, idx) = kn
        .ch
        .with_value(|ch| x.with_value(|xv| locate(xv, ch, cfg.bins, T::c(cfg.tail_bound))));
    let zeros = row_constant(raw)?;
    let x_in = tape.select(&inside, x, zeros)?;
    let bin = pick(&kn, &idx)?;
    let dx = x_in.sub(bin.ch)?;
    let sum = bin.d1.add(bin.d0)?.sub(bin.s.scale(T::c(2.0))?)?;
    let a = bin.h.mul(bin.s.sub(bin.d0)?)?.add(dx.mul(sum)?)?;
    let b = bin.h.mul(bin.d0)?.sub(dx.mul(sum)?)?;
    let c = bin.s.mul(dx)?.neg()?;
    let disc = b.square()?.sub(a.mul(c)?.scale(T::c(4.0))?)?;
    let xi = c.scale(T::c(2.0))?.div(b.neg()?.sub(disc.sqrt()?)?)?;
    let u = xi.mul(bin.w)?.add(bin.cw)?;
    let dlog = log_slope(&bin, xi)?.neg()?;
    Ok((tape.select(&inside, u, x)?, tape.select(&inside, dlog, zeros)?))
}

/// Autoregressive spline layer: coordinate `d` is transformed by a spline
/// whose parameters depend on the inputs `u[..d]`. The forward direction is
/// a single parallel pass; the inverse is sequential over coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct AutoregressiveRqSpline<T: Real> {
    config: SplineConfig,
    first: Tensor<T>,
    conditioners: Vec<Mlp<T>>,
}

impl<T: Real> AutoregressiveRqSpline<T> {
    pub fn new(dim: usize, hidden: &[usize], config: SplineConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Invalid("spline layer needs at least one dimension".into()));
        }
        let p = config.n_params();
        Ok(Self {
            config,
            first: Tensor::zeros(&[p]),
            conditioners: (1..dim).map(|d| Mlp::new(d, hidden, p, rng)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.conditioners.len() + 1
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.first];
        for m in &self.conditioners {
            v.extend(m.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.first];
        for m in &mut self.conditioners {
            v.extend(m.params_mut());
        }
        v
    }

    fn raw<'t>(
        &self,
        p: &[Var<'t, T>],
        d: usize,
        prefix: Option<Var<'t, T>>,
        n: usize,
        tape: &'t Tape<T>,
    ) -> Result<Var<'t, T>> {
        match prefix {
            None => tape.constant(Tensor::zeros(&[n, self.config.n_params()]))?.add(p[0]),
            Some(h) => {
                let per = self.conditioners[0].n_params();
                let start = 1 + (d - 1) * per;
                self.conditioners[d - 1].apply(&p[start..start + per], h)
            }
        }
    }

    pub fn forward<'t>(&self, p: &[Var<'t, T>], u: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = u.tape();
        let n = u.shape()[0];
        let mut cols = Vec::with_capacity(self.dim());
        let mut logdet = row_constant(u)?;
        for d in 0..self.dim() {
            let prefix = if d == 0 { None } else { Some(u.slice(1, 0, d)?) };
            let raw = self.raw(p, d, prefix, n, tape)?;
            let (x, dl) = rq_forward_on(raw, u.column(d)?, &self.config)?;
            cols.push(x.reshape(&[n, 1])?);
            logdet = logdet.add(dl)?;
        }
        Ok((tape.concat(&cols, 1)?, logdet))
    }

    pub fn inverse<'t>(&self, p: &[Var<'t, T>], x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let tape = x.tape();
        let n = x.shape()[0];
        let mut cols: Vec<Var<'t, T>> = Vec::with_capacity(self.dim());
        let mut logdet = row_constant(x)?;
        for d in 0..self.dim() {
            let prefix = if d == 0 { None } else { Some(tape.concat(&cols, 1)?) };
            let raw = self.raw(p, d, prefix, n, tape)?;
            let (u, dl) = rq_inverse_on(raw, x.column(d)?, &self.config)?;
            cols.push(u.reshape(&[n, 1])?);
            logdet = logdet.add(dl)?;
        }
        Ok((tape.concat(&cols, 1)?, logdet))
    }
}
