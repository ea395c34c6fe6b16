//! Coefficient matrices `a(x,t)` built as finite sums `Σ_q f_q(t)·B_q(x)`.
//!
//! The time factors are merely measurable (piecewise constant) or smooth,
//! and their integrals are computed exactly or adaptively so that the frozen
//! matrix `∫_s^t a(z,u) du` never requires mollifying in time. The spatial
//! factors come from a small catalog with analytic gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3, Vector};
use crate::quadrature::adaptive_gk;
use crate::scalar::Real;

/// Maximum number of separable terms in a field.
pub const MAX_TERMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Constant,
    PiecewiseConstant,
    Smooth,
    DiffusionDriven,
}

/// Piecewise-constant profile on `t_0 < t_1 < … < t_n`, extended by its end
/// values outside that range.
#[derive(Clone, Debug)]
pub struct TimeProfile<S> {
    breaks: Vec<f64>,
    values: Vec<S>,
    prefix: Vec<S>,
}

impl<S: Real> TimeProfile<S> {
    pub fn new(breaks: Vec<f64>, values: Vec<S>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::domain("time profile needs one more breakpoint than values"));
        }
        if breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("time profile breakpoints must be strictly increasing"));
        }
        let mut prefix = Vec::with_capacity(breaks.len());
        prefix.push(S::zero());
        for (k, v) in values.iter().enumerate() {
            let last = prefix[k];
            prefix.push(last + *v * S::lit(breaks[k + 1] - breaks[k]));
        }
        Ok(Self { breaks, values, prefix })
    }

    /// Uniform pieces of width `dt` starting at `t0`.
    pub fn uniform(t0: f64, dt: f64, values: Vec<S>) -> Result<Self> {
        let breaks = (0..=values.len()).map(|k| t0 + k as f64 * dt).collect();
        Self::new(breaks, values)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    fn piece(&self, t: f64) -> usize {
        let n = self.values.len();
        match self.breaks.partition_point(|&b| b <= t) {
            0 => 0,
            k => (k - 1).min(n - 1),
        }
    }

    pub fn eval(&self, t: f64) -> S {
        self.values[self.piece(t)]
    }

    fn antiderivative(&self, t: f64) -> S {
        let k = self.piece(t);
        self.prefix[k] + self.values[k] * S::lit(t - self.breaks[k])
    }

    pub fn integral(&self, s: f64, t: f64) -> S {
        self.antiderivative(t) - self.antiderivative(s)
    }
}

#[derive(Clone, Debug)]
pub enum TimeFunction<S> {
    Constant(S),
    Piecewise(TimeProfile<S>),
    /// `c0 + c1·sin(ω t + φ)`, integrated adaptively.
    Sine { c0: f64, c1: f64, omega: f64, phase: f64 },
}

impl<S: Real> TimeFunction<S> {
    pub fn eval(&self, t: f64) -> S {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Piecewise(p) => p.eval(t),
            TimeFunction::Sine { c0, c1, omega, phase } => S::lit(c0 + c1 * (omega * t + phase).sin()),
        }
    }

    pub fn integral(&self, s: f64, t: f64) -> Result<S> {
        match self {
            TimeFunction::Constant(c) => Ok(*c * S::lit(t - s)),
            TimeFunction::Piecewise(p) => Ok(p.integral(s, t)),
            TimeFunction::Sine { c0, c1, omega, phase } => {
                let f = |u: f64| c0 + c1 * (omega * u + phase).sin();
                let tol = 1e-14 * (t - s).abs().max(1e-300) * (c0.abs() + c1.abs());
                adaptive_gk(f, s, t, tol).map(S::lit)
            }
        }
    }

    fn breaks(&self) -> &[f64] {
        match self {
            TimeFunction::Piecewise(p) => p.breaks(),
            _ => &[],
        }
    }
}

/// Spatial factor `B(x)` from the catalog.
#[derive(Clone, Debug)]
pub enum SpatialFn {
    Const(Matrix<f64>),
    /// `tanh(⟨w,x⟩)·P`
    Tanh { w: Vector<f64>, p: Matrix<f64> },
    /// `⟨w,x⟩·P`; not elliptic on all of ℝ^d, only used locally.
    Linear { w: Vector<f64>, p: Matrix<f64> },
}

impl SpatialFn {
    pub fn dim(&self) -> usize {
        match self {
            SpatialFn::Const(p) | SpatialFn::Tanh { p, .. } | SpatialFn::Linear { p, .. } => p.dim,
        }
    }

    /// Scalar profile `h(x)` and its derivative `h'` along `w`, so that
    /// `B(x) = h(x)·P` and `∂_k B = h'·w_k·P`.
    #[inline]
    pub fn profile(&self, x: &Vector<f64>) -> (f64, f64) {
        match self {
            SpatialFn::Const(_) => (1.0, 0.0),
            SpatialFn::Tanh { w, .. } => {
                let th = w.dot(x).tanh();
                (th, 1.0 - th * th)
            }
            SpatialFn::Linear { w, .. } => (w.dot(x), 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        match self {
            SpatialFn::Const(p) | SpatialFn::Tanh { p, .. } | SpatialFn::Linear { p, .. } => p,
        }
    }

    fn direction(&self) -> Vector<f64> {
        match self {
            SpatialFn::Const(p) => Vector::zeros(p.dim),
            SpatialFn::Tanh { w, .. } | SpatialFn::Linear { w, .. } => *w,
        }
    }

    pub fn eval(&self, x: &Vector<f64>) -> Matrix<f64> {
        self.matrix().scale(self.profile(x).0)
    }

    /// `∂_k B_ij(x)` as `t[i][j][k]`.
    pub fn gradient(&self, x: &Vector<f64>) -> Tensor3<f64> {
        let d = self.dim();
        let mut g = Tensor3::zeros(d);
        let (_, dh) = self.profile(x);
        let (w, p) = (self.direction(), self.matrix());
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    g.t[i][j][k] = dh * w[k] * p.m[i][j];
                }
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct Term<S> {
    pub time: TimeFunction<S>,
    pub space: SpatialFn,
}

/// Per-interval data shared by every spatial point: `f_q(t)` and
/// `∫_s^t f_q(u) du` for each term.
#[derive(Clone, Copy, Debug)]
pub struct TimeSlice<S> {
    pub s: f64,
    pub t: f64,
    pub at_t: [S; MAX_TERMS],
    pub integral: [S; MAX_TERMS],
}

/// Spatial profiles `(h_q(x), h_q'(x))` of every term at one point.
#[derive(Clone, Copy, Debug)]
pub struct PointEval {
    pub h: [f64; MAX_TERMS],
    pub dh: [f64; MAX_TERMS],
}

/// Per-term constants: `P`, its symmetric part and `(wᵀP)_i = Σ_j w_j P_ji`.
#[derive(Clone, Debug)]
struct TermCache {
    p: Matrix<f64>,
    p_sym: Matrix<f64>,
    wp: Vector<f64>,
    constant: bool,
}

/// `A = sym ∫_s^t a(𝔷,u) du`.
#[derive(Clone, Copy, Debug)]
pub struct FrozenIntegral<S> {
    pub z: Vector<f64>,
    pub s: f64,
    pub t: f64,
    pub a: Matrix<S>,
}

#[derive(Clone, Debug)]
pub struct CoefficientField<S> {
    dim: usize,
    terms: Vec<Term<S>>,
    lambda: f64,
    lipschitz: f64,
    kind: FieldKind,
    breaks: Vec<f64>,
    cache: Vec<TermCache>,
}

impl<S: Real> CoefficientField<S> {
    pub fn new(dim: usize, terms: Vec<Term<S>>, lambda: f64, lipschitz: f64, kind: FieldKind) -> Result<Self> {
        if terms.is_empty() || terms.len() > MAX_TERMS {
            return Err(Error::domain(format!("a field needs 1..={MAX_TERMS} terms")));
        }
        if terms.iter().any(|t| t.space.dim() != dim) {
            return Err(Error::domain("term dimension mismatch"));
        }
        if !(lambda >= 1.0) || !(lipschitz >= 0.0) {
            return Err(Error::domain("need lambda >= 1 and K_a >= 0"));
        }
        let mut breaks: Vec<f64> = terms.iter().flat_map(|t| t.time.breaks().iter().copied()).collect();
        breaks.sort_by(|a, b| a.total_cmp(b));
        breaks.dedup();
        let cache = terms
            .iter()
            .map(|t| {
                let p = *t.space.matrix();
                let w = t.space.direction();
                let mut wp = Vector::zeros(dim);
                for i in 0..dim {
                    wp[i] = (0..dim).map(|j| w[j] * p.m[j][i]).sum();
                }
                TermCache { p, p_sym: p.symmetric_part(), wp, constant: matches!(t.space, SpatialFn::Const(_)) }
            })
            .collect();
        Ok(Self { dim, terms, lambda, lipschitz, kind, breaks, cache })
    }

    /// `a ≡ c·I`.
    pub fn constant_scalar(dim: usize, c: f64) -> Self {
        let lambda = c.max(1.0 / c).max(1.0);
        let term = Term { time: TimeFunction::Constant(S::one()), space: SpatialFn::Const(Matrix::scalar(dim, c)) };
        Self::new(dim, vec![term], lambda, 0.0, FieldKind::Constant).expect("valid constant field")
    }

    /// x-independent field `f(t)·P` with a piecewise-constant `f`.
    pub fn piecewise_scalar(p: Matrix<f64>, profile: TimeProfile<S>, lambda: f64) -> Result<Self> {
        let term = Term { time: TimeFunction::Piecewise(profile), space: SpatialFn::Const(p) };
        Self::new(p.dim, vec![term], lambda, 0.0, FieldKind::PiecewiseConstant)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }
    pub fn kind(&self) -> FieldKind {
        self.kind
    }
    pub fn terms(&self) -> &[Term<S>] {
        &self.terms
    }

    /// Sorted union of the time breakpoints of all terms.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    /// True when no term depends on x.
    pub fn is_x_independent(&self) -> bool {
        self.terms.iter().all(|t| matches!(t.space, SpatialFn::Const(_)))
    }

    #[inline]
    pub fn point(&self, x: &Vector<f64>) -> PointEval {
        let mut h = [0.0; MAX_TERMS];
        let mut dh = [0.0; MAX_TERMS];
        for (q, term) in self.terms.iter().enumerate() {
            (h[q], dh[q]) = term.space.profile(x);
        }
        PointEval { h, dh }
    }

    pub fn slice(&self, s: f64, t: f64) -> Result<TimeSlice<S>> {
        let mut at_t = [S::zero(); MAX_TERMS];
        let mut integral = [S::zero(); MAX_TERMS];
        for (q, term) in self.terms.iter().enumerate() {
            at_t[q] = term.time.eval(t);
            integral[q] = term.time.integral(s, t)?;
        }
        Ok(TimeSlice { s, t, at_t, integral })
    }

    /// `a(x,t)` from precomputed spatial factors.
    #[inline]
    pub fn value_at(&self, p: &PointEval, sl: &TimeSlice<S>) -> Matrix<S> {
        self.combine(p, &sl.at_t, false)
    }

    /// `sym ∫_s^t a(z,u) du` from precomputed spatial factors.
    #[inline]
    pub fn frozen_at(&self, p: &PointEval, sl: &TimeSlice<S>) -> Matrix<S> {
        self.combine(p, &sl.integral, true)
    }

    /// `γ_i = Σ_j ∂_j a_ji` from precomputed spatial factors.
    #[inline]
    pub fn gamma_at(&self, p: &PointEval, sl: &TimeSlice<S>) -> Vector<S> {
        let mut g = Vector::zeros(self.dim);
        for (q, c) in self.cache.iter().enumerate() {
            if c.constant {
                continue;
            }
            let f = sl.at_t[q] * S::lit(p.dh[q]);
            for i in 0..self.dim {
                g[i] = g[i] + f * S::lit(c.wp[i]);
            }
        }
        g
    }

    #[inline]
    fn combine(&self, p: &PointEval, f: &[S; MAX_TERMS], sym: bool) -> Matrix<S> {
        let dim = self.dim;
        let mut a = Matrix::zeros(dim);
        for (q, c) in self.cache.iter().enumerate() {
            let fq = f[q] * S::lit(p.h[q]);
            let b = if sym { &c.p_sym } else { &c.p };
            for i in 0..dim {
                for j in 0..dim {
                    a.m[i][j] = a.m[i][j] + fq * S::lit(b.m[i][j]);
                }
            }
        }
        a
    }

    pub fn eval(&self, x: &Vector<f64>, t: f64) -> Matrix<S> {
        let p = self.point(x);
        let mut f = [S::zero(); MAX_TERMS];
        for (q, term) in self.terms.iter().enumerate() {
            f[q] = term.time.eval(t);
        }
        self.combine(&p, &f, false)
    }

    pub fn integrate_in_time(&self, z: &Vector<f64>, s: f64, t: f64) -> Result<FrozenIntegral<S>> {
        if !(s < t) {
            return Err(Error::domain(format!("integrate_in_time needs s < t (got s={s}, t={t})")));
        }
        let sl = self.slice(s, t)?;
        let a = self.frozen_at(&self.point(z), &sl);
        Ok(FrozenIntegral { z: *z, s, t, a })
    }

    /// `∂a_ij/∂x_k` as `t[i][j][k]`.
    pub fn gradient_x(&self, x: &Vector<f64>, t: f64) -> Tensor3<S> {
        let mut g = Tensor3::zeros(self.dim);
        for term in &self.terms {
            let f = term.time.eval(t);
            let gq = term.space.gradient(x);
            for i in 0..self.dim {
                for j in 0..self.dim {
                    for k in 0..self.dim {
                        g.t[i][j][k] = g.t[i][j][k] + f * S::lit(gq.t[i][j][k]);
                    }
                }
            }
        }
        g
    }

    pub fn divergence_gamma(&self, x: &Vector<f64>, t: f64) -> Vector<S> {
        let sl = TimeSlice {
            s: t,
            t,
            at_t: std::array::from_fn(|q| self.terms.get(q).map_or(S::zero(), |term| term.time.eval(t))),
            integral: [S::zero(); MAX_TERMS],
        };
        self.gamma_at(&self.point(x), &sl)
    }
}

impl CoefficientField<f64> {
    /// Samples the ellipticity sandwich and the Lipschitz bound; returns the
    /// first violation found, if any.
    pub fn check_bounds(&self, rng: &mut impl Rng, samples: usize, half_width: f64, horizon: f64) -> Option<String> {
        let d = self.dim;
        let lam = self.lambda;
        let tol = 1e-12;
        for _ in 0..samples {
            let x = Vector::<f64>::from_slice(&(0..d).map(|_| rng.random_range(-half_width..half_width)).collect::<Vec<_>>());
            let t = rng.random_range(0.0..horizon);
            let mut zeta = Vector::<f64>::from_slice(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let n = zeta.norm();
            if n < 1e-6 {
                continue;
            }
            zeta = zeta.scale(1.0 / n);
            let a = self.eval(&x, t);
            let q = a.quad_form(&zeta);
            if q < 1.0 / lam - tol || q > lam + tol {
                return Some(format!("<a ζ, ζ> = {q:.6} outside [1/λ, λ] = [{:.6}, {lam:.6}] at x={:?}, t={t}", 1.0 / lam, x.as_slice()));
            }
            let dx = Vector::<f64>::from_slice(&(0..d).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>());
            let x2 = x + dx;
            let diff = (self.eval(&x2, t) - a).max_abs();
            if diff > self.lipschitz * dx.norm() + tol {
                return Some(format!("|a(x)-a(x')| = {diff:.6} exceeds K_a |x-x'| at x={:?}, t={t}", x.as_slice()));
            }
        }
        None
    }
}

/// Catalog builders for the shipped families.
pub mod catalog {
    use super::*;

    /// `c(t)·I + κ·tanh(x₁)·I`, with `c` piecewise constant.
    ///
    /// The two terms do not factor, so the time roughness of `c` genuinely
    /// interacts with the spatial variation.
    pub fn modulated_tanh<S: Real>(dim: usize, profile: TimeProfile<S>, kappa: f64, lambda: f64) -> Result<CoefficientField<S>> {
        let lo = profile.values().iter().map(|v| v.re()).fold(f64::INFINITY, f64::min);
        let hi = profile.values().iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        if !(kappa >= 0.0 && lo - kappa >= 1.0 / lambda && hi + kappa <= lambda) {
            return Err(Error::config(
                "H1",
                format!("profile range [{lo}, {hi}] ± {kappa} leaves the ellipticity band [1/{lambda}, {lambda}]"),
            ));
        }
        let mut w = Vector::zeros(dim);
        w[0] = 1.0;
        let terms = vec![
            Term { time: TimeFunction::Piecewise(profile), space: SpatialFn::Const(Matrix::identity(dim)) },
            Term { time: TimeFunction::Constant(S::one()), space: SpatialFn::Tanh { w, p: Matrix::scalar(dim, kappa) } },
        ];
        CoefficientField::new(dim, terms, lambda, kappa, FieldKind::PiecewiseConstant)
    }

    /// Alternating values `lo, hi, lo, …` on `pieces` equal pieces of `[0, horizon]`.
    pub fn alternating_profile(pieces: usize, horizon: f64, lo: f64, hi: f64) -> TimeProfile<f64> {
        let values = (0..pieces).map(|k| if k % 2 == 0 { lo } else { hi }).collect();
        TimeProfile::uniform(0.0, horizon / pieces as f64, values).expect("valid profile")
    }

    /// `f(t)·(1 + κ·tanh(x₁))·I` with a generic time factor.
    pub fn separable_tanh<S: Real>(dim: usize, time: TimeFunction<S>, kappa: f64, lambda: f64, lipschitz: f64, kind: FieldKind) -> Result<CoefficientField<S>> {
        let mut w = Vector::zeros(dim);
        w[0] = 1.0;
        let terms = vec![
            Term { time: time.clone(), space: SpatialFn::Const(Matrix::identity(dim)) },
            Term { time, space: SpatialFn::Tanh { w, p: Matrix::scalar(dim, kappa) } },
        ];
        CoefficientField::new(dim, terms, lambda, lipschitz, kind)
    }
}
