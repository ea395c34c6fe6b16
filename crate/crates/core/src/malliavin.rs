//! Diffusion-driven coefficients and their Malliavin derivatives.
//!
//! The carrier is a scalar diffusion `dξ = β(ξ)dt + σ(ξ)dB` simulated by
//! Euler–Maruyama. Its first variation `D_{u_k}ξ_{u_l}` solves the linear
//! equation driven by the same increments; in one dimension that recursion is
//! a running product, so a path stores the prefix products `E_l` and any
//! `D_{u_k}ξ_{u_l} = σ(ξ_k)·E_l/E_{k+1}` is read off in O(1).
//!
//! A random coefficient `a(x, ξ_t)` is held constant on a coarse time grid
//! along each path, which turns one realization into an ordinary
//! piecewise-in-time [`CoefficientField`]. Seeding the held values with their
//! derivative along a bump at time `r` in [`Dual`] arithmetic yields
//! `D_rΦ`, `D_rΓ` and `D_r∇Γ` from the deterministic pipeline unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_fields::{CoefficientField, FieldKind, SpatialFn, Term, TimeFunction, TimeProfile};
use crate::error::{Error, Result};
use crate::fundamental_solution::FundamentalSolution;
use crate::kernel_iteration::{eval_k, GridParams};
use crate::linalg::{Matrix, Vector};
use crate::parametrix::{fit_amplitude, EnvelopeFit, FitGrid, GaussianEnvelope, EPS_FIT};
use crate::scalar::{Dual, Real};

/// Scalar maps of one variable with analytic first and second derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScalarMap {
    /// `c0 + c1·y`
    Affine { c0: f64, c1: f64 },
    /// `c0 + c1·sin(ω y + φ)`
    Sine { c0: f64, c1: f64, omega: f64, phase: f64 },
    /// `c0 + c1·tanh(y)`
    Tanh { c0: f64, c1: f64 },
    Sum(Vec<ScalarMap>),
}

impl ScalarMap {
    pub fn constant(c: f64) -> Self {
        ScalarMap::Affine { c0: c, c1: 0.0 }
    }

    /// `(f, f', f'')` at `y`.
    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        match self {
            ScalarMap::Affine { c0, c1 } => (c0 + c1 * y, *c1, 0.0),
            ScalarMap::Sine { c0, c1, omega, phase } => {
                let (s, c) = (omega * y + phase).sin_cos();
                (c0 + c1 * s, c1 * omega * c, -c1 * omega * omega * s)
            }
            ScalarMap::Tanh { c0, c1 } => {
                let th = y.tanh();
                let sech2 = 1.0 - th * th;
                (c0 + c1 * th, c1 * sech2, -2.0 * c1 * th * sech2)
            }
            ScalarMap::Sum(parts) => parts.iter().fold((0.0, 0.0, 0.0), |acc, p| {
                let v = p.eval(y);
                (acc.0 + v.0, acc.1 + v.1, acc.2 + v.2)
            }),
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        self.eval(y).0
    }

    /// Upper bounds on `sup|f'|` and `sup|f''|` read off the coefficients.
    pub fn derivative_bounds(&self) -> (f64, f64) {
        match self {
            ScalarMap::Affine { c1, .. } => (c1.abs(), 0.0),
            ScalarMap::Sine { c1, omega, .. } => (c1.abs() * omega.abs(), c1.abs() * omega * omega),
            // sup|2 tanh sech²| = 4/(3√3)
            ScalarMap::Tanh { c1, .. } => (c1.abs(), c1.abs() * 4.0 / (3.0 * 3f64.sqrt())),
            ScalarMap::Sum(parts) => parts.iter().fold((0.0, 0.0), |acc, p| {
                let b = p.derivative_bounds();
                (acc.0 + b.0, acc.1 + b.1)
            }),
        }
    }

    /// True when the map has no dependence on its argument.
    pub fn is_constant(&self) -> bool {
        match self {
            ScalarMap::Affine { c1, .. } => *c1 == 0.0,
            ScalarMap::Sine { c1, omega, .. } => *c1 == 0.0 || *omega == 0.0,
            ScalarMap::Tanh { c1, .. } => *c1 == 0.0,
            ScalarMap::Sum(parts) => parts.iter().all(ScalarMap::is_constant),
        }
    }
}

/// Scalar time-homogeneous SDE `dξ = β(ξ)dt + σ(ξ)dB`, `ξ_0 = x0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub drift: ScalarMap,
    pub diffusion: ScalarMap,
    pub x0: f64,
}

impl SdeSpec {
    pub fn new(drift: ScalarMap, diffusion: ScalarMap, x0: f64) -> Self {
        Self { drift, diffusion, x0 }
    }

    /// Ornstein–Uhlenbeck `dξ = -θξ dt + σ dB`.
    pub fn ornstein_uhlenbeck(theta: f64, sigma: f64, x0: f64) -> Self {
        Self::new(ScalarMap::Affine { c0: 0.0, c1: -theta }, ScalarMap::constant(sigma), x0)
    }

    /// `dξ = bξ dt + σ dB` with constant `σ`.
    pub fn linear(b: f64, sigma: f64, x0: f64) -> Self {
        Self::new(ScalarMap::Affine { c0: 0.0, c1: b }, ScalarMap::constant(sigma), x0)
    }

    /// Nonlinear drift and state-dependent diffusion used by the stochastic suites.
    pub fn generic() -> Self {
        Self::new(
            ScalarMap::Sum(vec![
                ScalarMap::Affine { c0: 0.0, c1: -1.0 },
                ScalarMap::Sine { c0: 0.0, c1: 0.5, omega: 1.0, phase: 0.0 },
            ]),
            ScalarMap::Sine { c0: 0.6, c1: 0.2, omega: 1.0, phase: std::f64::consts::FRAC_PI_2 },
            0.3,
        )
    }

    /// Global Lipschitz constant `K_{β,σ}` (also bounds the first derivatives).
    pub fn lipschitz(&self) -> f64 {
        self.drift.derivative_bounds().0.max(self.diffusion.derivative_bounds().0)
    }

    /// Largest violation of `|f(x)-f(x')| ≤ K|x-x'|` on random pairs, if any.
    pub fn check_lipschitz(&self, rng: &mut impl Rng, samples: usize) -> Option<String> {
        let k = self.lipschitz();
        for _ in 0..samples {
            let x: f64 = rng.random_range(-10.0..10.0);
            let y: f64 = rng.random_range(-10.0..10.0);
            for (name, f) in [("drift", &self.drift), ("diffusion", &self.diffusion)] {
                let diff = (f.value(x) - f.value(y)).abs();
                if diff > k * (x - y).abs() * (1.0 + 1e-12) + 1e-14 {
                    return Some(format!("{name} Lipschitz bound fails at ({x}, {y}): {diff} > {k}·|x-y|"));
                }
            }
        }
        None
    }
}

/// Euler–Maruyama paths on the uniform grid `u_k = k·Δ`, together with the
/// prefix products of the first-variation recursion.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub dt: f64,
    pub n_steps: usize,
    pub seed: u64,
    /// Index of the first path (streams are numbered globally).
    pub first_path: u64,
    /// `ΔB_k` per path, `k < n_steps`.
    pub increments: Vec<Vec<f64>>,
    /// `ξ_{u_k}` per path, `k ≤ n_steps`.
    pub xi: Vec<Vec<f64>>,
    /// `E_l = Π_{m<l} (1 + β'(ξ_m)Δ + σ'(ξ_m)ΔB_m)` per path.
    variation: Vec<Vec<f64>>,
    /// `σ(ξ_k)` per path.
    sigma: Vec<Vec<f64>>,
}

/// Independent normal stream for path `index`; reproducible regardless of
/// which worker draws it.
pub fn path_increments(seed: u64, index: u64, n_steps: usize, dt: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let sd = dt.sqrt();
    (0..n_steps).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Euler–Maruyama from given increments.
pub fn integrate_path(spec: &SdeSpec, dt: f64, increments: &[f64]) -> Vec<f64> {
    let mut xi = Vec::with_capacity(increments.len() + 1);
    let mut x = spec.x0;
    xi.push(x);
    for db in increments {
        x += spec.drift.value(x) * dt + spec.diffusion.value(x) * db;
        xi.push(x);
    }
    xi
}

fn variation_products(spec: &SdeSpec, dt: f64, xi: &[f64], increments: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut e = Vec::with_capacity(xi.len());
    let mut sigma = Vec::with_capacity(xi.len());
    let mut acc = 1.0;
    e.push(acc);
    for (k, &x) in xi.iter().enumerate() {
        let (s, ds, _) = spec.diffusion.eval(x);
        sigma.push(s);
        if let Some(db) = increments.get(k) {
            acc *= 1.0 + spec.drift.eval(x).1 * dt + ds * db;
            e.push(acc);
        }
    }
    (e, sigma)
}

/// Simulates `n_paths` paths on `[0, horizon]` with `n_steps` uniform steps.
pub fn simulate_paths(spec: &SdeSpec, n_paths: usize, horizon: f64, n_steps: usize, seed: u64) -> Result<PathBundle> {
    simulate_range(spec, 0..n_paths as u64, horizon, n_steps, seed)
}

/// Paths with global indices in `range`; path `i` is identical whichever range it is drawn in.
pub fn simulate_range(spec: &SdeSpec, range: std::ops::Range<u64>, horizon: f64, n_steps: usize, seed: u64) -> Result<PathBundle> {
    if n_steps == 0 || !(horizon > 0.0) {
        return Err(Error::domain("need a positive horizon and at least one step"));
    }
    let dt = horizon / n_steps as f64;
    let increments: Vec<Vec<f64>> = range.clone().into_par_iter().map(|i| path_increments(seed, i, n_steps, dt)).collect();
    PathBundle::from_increments(spec, dt, increments, seed, range.start)
}

impl PathBundle {
    pub fn from_increments(spec: &SdeSpec, dt: f64, increments: Vec<Vec<f64>>, seed: u64, first_path: u64) -> Result<Self> {
        let n_steps = increments.first().map_or(0, Vec::len);
        if increments.iter().any(|p| p.len() != n_steps) {
            return Err(Error::domain("ragged increments"));
        }
        let xi: Vec<Vec<f64>> = increments.par_iter().map(|db| integrate_path(spec, dt, db)).collect();
        let (variation, sigma) = xi.par_iter().zip(&increments).map(|(x, db)| variation_products(spec, dt, x, db)).unzip();
        Ok(Self { dt, n_steps, seed, first_path, increments, xi, variation, sigma })
    }

    pub fn n_paths(&self) -> usize {
        self.xi.len()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Grid index of `t`, which must be a node.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k > self.n_steps as f64 || (k * self.dt - t).abs() > 1e-9 * self.horizon().max(1.0) {
            return Err(Error::domain(format!("time {t} is not a grid node")));
        }
        Ok(k as usize)
    }

    /// `D_{u_k}ξ_{u_l}`; zero for `k > l`.
    #[inline]
    pub fn first_variation(&self, path: usize, k: usize, l: usize) -> f64 {
        if k > l {
            return 0.0;
        }
        let s = self.sigma[path][k];
        if l == k {
            return s;
        }
        let e = &self.variation[path];
        s * e[l] / e[k + 1]
    }

    /// `ψ(u_k) = max_{l ≥ k} |D_{u_k}ξ_{u_l}|` for every node of one path.
    pub fn psi(&self, path: usize) -> Vec<f64> {
        let n = self.n_steps;
        let e = &self.variation[path];
        // running max of |E_l| over l ≥ k+1
        let mut tail = vec![0.0f64; n + 2];
        for l in (1..=n).rev() {
            tail[l] = tail[l + 1].max(e[l].abs());
        }
        (0..=n)
            .map(|k| {
                let s = self.sigma[path][k].abs();
                if k == n {
                    s
                } else {
                    s.max(s * tail[k + 1] / e[k + 1].abs())
                }
            })
            .collect()
    }
}

/// `ψ` for every path.
#[derive(Clone, Debug)]
pub struct PsiProcess {
    pub values: Vec<Vec<f64>>,
}

pub fn psi(bundle: &PathBundle) -> PsiProcess {
    PsiProcess { values: (0..bundle.n_paths()).into_par_iter().map(|p| bundle.psi(p)).collect() }
}

impl PsiProcess {
    /// Monte Carlo estimate of `E ∫_0^T ψ(r)^q dr` (left-point rule).
    pub fn moment(&self, q: f64, dt: f64) -> f64 {
        let n = self.values.len().max(1) as f64;
        self.values
            .iter()
            .map(|p| p[..p.len() - 1].iter().map(|v| v.powf(q) * dt).sum::<f64>())
            .sum::<f64>()
            / n
    }
}

/// Spatial factor of a random-coefficient term (scalar, `d = 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    One,
    Tanh,
}

impl Profile {
    fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Profile::One => (1.0, 0.0),
            Profile::Tanh => {
                let th = x.tanh();
                (th, 1.0 - th * th)
            }
        }
    }

    fn spatial(self) -> SpatialFn {
        match self {
            Profile::One => SpatialFn::Const(Matrix::identity(1)),
            Profile::Tanh => SpatialFn::Tanh { w: Vector::from_slice(&[1.0]), p: Matrix::identity(1) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomTerm {
    pub factor: ScalarMap,
    pub profile: Profile,
}

/// `a(x, y) = Σ_q f_q(y)·h_q(x)` evaluated along `y = ξ_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomCoefficient {
    pub terms: Vec<RandomTerm>,
    pub lambda: f64,
}

/// `a`, `∂_y a`, `∂_x a` and `∂_x∂_y a` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientJet {
    pub a: f64,
    pub dy: f64,
    pub dx: f64,
    pub dxy: f64,
}

impl RandomCoefficient {
    /// `2 + sin(y)`, independent of `x`.
    pub fn x_independent() -> Self {
        Self {
            terms: vec![RandomTerm { factor: ScalarMap::Sine { c0: 2.0, c1: 1.0, omega: 1.0, phase: 0.0 }, profile: Profile::One }],
            lambda: 3.0,
        }
    }

    /// `1.5 + 0.25·sin(y) + 0.25·cos(y)·tanh(x)`.
    pub fn mixed() -> Self {
        Self {
            terms: vec![
                RandomTerm { factor: ScalarMap::Sine { c0: 1.5, c1: 0.25, omega: 1.0, phase: 0.0 }, profile: Profile::One },
                RandomTerm {
                    factor: ScalarMap::Sine { c0: 0.0, c1: 0.25, omega: 1.0, phase: std::f64::consts::FRAC_PI_2 },
                    profile: Profile::Tanh,
                },
            ],
            lambda: 2.0,
        }
    }

    pub fn jet(&self, x: f64, y: f64) -> CoefficientJet {
        let mut j = CoefficientJet { a: 0.0, dy: 0.0, dx: 0.0, dxy: 0.0 };
        for term in &self.terms {
            let (f, df, _) = term.factor.eval(y);
            let (h, dh) = term.profile.eval(x);
            j.a += f * h;
            j.dy += df * h;
            j.dx += f * dh;
            j.dxy += df * dh;
        }
        j
    }

    /// `K_a` bounding `|∂_y a|` and `|∂_y ∂_x a|`, so that `|D_r a| + |D_r∇a|`-type
    /// quantities are dominated by `K_a·ψ(r)`.
    pub fn malliavin_bound(&self) -> f64 {
        let (mut dy, mut dxy) = (0.0, 0.0);
        for term in &self.terms {
            let b = term.factor.derivative_bounds().0;
            dy += b;
            if term.profile == Profile::Tanh {
                dxy += b;
            }
        }
        f64::max(dy, dxy)
    }

    pub fn is_x_independent(&self) -> bool {
        self.terms.iter().all(|t| t.profile == Profile::One)
    }

    pub fn is_deterministic(&self) -> bool {
        self.terms.iter().all(|t| t.factor.is_constant())
    }

    /// Range `[lo, hi]` of `a(·, y)` over `x` at fixed factor values.
    fn range(&self, f: &[f64]) -> (f64, f64) {
        let (mut c, mut r) = (0.0, 0.0);
        for (term, v) in self.terms.iter().zip(f) {
            match term.profile {
                Profile::One => c += v,
                Profile::Tanh => r += v.abs(),
            }
        }
        (c - r, c + r)
    }

    /// Number of hold pieces must divide the step count.
    fn stride(bundle: &PathBundle, pieces: usize) -> Result<usize> {
        if pieces == 0 || bundle.n_steps % pieces != 0 {
            return Err(Error::domain(format!("{pieces} hold pieces do not divide {} steps", bundle.n_steps)));
        }
        Ok(bundle.n_steps / pieces)
    }

    fn build<S: Real>(&self, horizon: f64, pieces: usize, values: Vec<Vec<S>>) -> Result<CoefficientField<S>> {
        let width = horizon / pieces as f64;
        let mut lip: f64 = 0.0;
        let mut terms = Vec::with_capacity(self.terms.len());
        for (term, vals) in self.terms.iter().zip(values) {
            if term.profile == Profile::Tanh {
                lip += vals.iter().map(|v| v.re().abs()).fold(0.0, f64::max);
            }
            let time = if term.factor.is_constant() {
                TimeFunction::Constant(vals[0])
            } else {
                TimeFunction::Piecewise(TimeProfile::uniform(0.0, width, vals)?)
            };
            terms.push(Term { time, space: term.profile.spatial() });
        }
        CoefficientField::new(1, terms, self.lambda, lip, FieldKind::DiffusionDriven)
    }

    fn held_values(&self, xi: &[f64], stride: usize, pieces: usize) -> Result<Vec<Vec<f64>>> {
        let values: Vec<Vec<f64>> = self.terms.iter().map(|t| (0..pieces).map(|j| t.factor.value(xi[j * stride])).collect()).collect();
        for j in 0..pieces {
            let f: Vec<f64> = values.iter().map(|v| v[j]).collect();
            let (lo, hi) = self.range(&f);
            if lo < 1.0 / self.lambda - 1e-12 || hi > self.lambda + 1e-12 {
                return Err(Error::config("H1", format!("held coefficient range [{lo}, {hi}] leaves [1/{0}, {0}]", self.lambda)));
            }
        }
        Ok(values)
    }

    /// Coefficient field of one path, with `a(x, ξ_{u_j})` held on each of
    /// `pieces` equal pieces of `[0, T]`.
    pub fn realize(&self, bundle: &PathBundle, path: usize, pieces: usize) -> Result<CoefficientField<f64>> {
        self.realize_path(&bundle.xi[path], bundle.horizon(), pieces)
    }

    /// As [`Self::realize`] for an explicit path `ξ` on a uniform grid of `[0, horizon]`.
    pub fn realize_path(&self, xi: &[f64], horizon: f64, pieces: usize) -> Result<CoefficientField<f64>> {
        let n = xi.len() - 1;
        if pieces == 0 || n % pieces != 0 {
            return Err(Error::domain(format!("{pieces} hold pieces do not divide {n} steps")));
        }
        let values = self.held_values(xi, n / pieces, pieces)?;
        self.build(horizon, pieces, values)
    }

    /// The realized field in dual numbers, each held value carrying
    /// `D_{u_k} f_q(ξ_{u_j}) = f_q'(ξ_{u_j})·D_{u_k}ξ_{u_j}` for `u_j > u_k`.
    ///
    /// A value held from `ξ_{u_k}` itself carries no derivative: on the grid
    /// the bump at `u_k` is the increment `ΔB_k`, which `ξ_{u_k}` predates.
    pub fn realize_dual(&self, bundle: &PathBundle, path: usize, pieces: usize, k: usize) -> Result<CoefficientField<Dual>> {
        let stride = Self::stride(bundle, pieces)?;
        let xi = &bundle.xi[path];
        self.held_values(xi, stride, pieces)?;
        let values = self
            .terms
            .iter()
            .map(|t| {
                (0..pieces)
                    .map(|j| {
                        let l = j * stride;
                        let (f, df, _) = t.factor.eval(xi[l]);
                        // the bump at u_k moves ξ from u_{k+1} on
                        let dv = if l > k { bundle.first_variation(path, k, l) } else { 0.0 };
                        Dual::new(f, df * dv)
                    })
                    .collect()
            })
            .collect();
        self.build(bundle.horizon(), pieces, values)
    }

    /// Chain rule `D_{u_k} a(x, ξ_{u_l}) = ∂_y a(x, ξ_{u_l})·D_{u_k}ξ_{u_l}`, zero for `k > l`.
    pub fn malliavin_coefficient(&self, bundle: &PathBundle, path: usize, x: f64, l: usize, k: usize) -> f64 {
        self.jet(x, bundle.xi[path][l]).dy * bundle.first_variation(path, k, l)
    }

    /// Same for the spatial derivative `D_{u_k} ∂_x a(x, ξ_{u_l})`.
    pub fn malliavin_coefficient_dx(&self, bundle: &PathBundle, path: usize, x: f64, l: usize, k: usize) -> f64 {
        self.jet(x, bundle.xi[path][l]).dxy * bundle.first_variation(path, k, l)
    }
}

/// Path `path` re-integrated with `ΔB_k` replaced by `ΔB_k + ε`.
pub fn bumped_path(spec: &SdeSpec, bundle: &PathBundle, path: usize, k: usize, eps: f64) -> Vec<f64> {
    let mut db = bundle.increments[path].clone();
    db[k] += eps;
    integrate_path(spec, bundle.dt, &db)
}

/// Central bump quotient `(F(ξ^{+ε}) - F(ξ^{-ε}))/(2ε)` of a path functional.
pub fn bump_derivative(spec: &SdeSpec, bundle: &PathBundle, path: usize, k: usize, eps: f64, f: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let up = f(&bumped_path(spec, bundle, path, k, eps))?;
    let down = f(&bumped_path(spec, bundle, path, k, -eps))?;
    Ok((up - down) / (2.0 * eps))
}

/// Γ and its derivatives along a bump at grid node `k` of one path.
pub struct MalliavinKernel {
    pub path: usize,
    pub k: usize,
    pub r: f64,
    /// `ψ(r)` of the path.
    pub psi_r: f64,
    pub fs: FundamentalSolution<Dual>,
}

impl MalliavinKernel {
    pub fn new(coef: &RandomCoefficient, bundle: &PathBundle, path: usize, pieces: usize, k: usize, params: GridParams) -> Result<Self> {
        let field = coef.realize_dual(bundle, path, pieces, k)?;
        let fs = FundamentalSolution::new(field, bundle.horizon(), params)?;
        Ok(Self { path, k, r: bundle.time(k), psi_r: bundle.psi(path)[k], fs })
    }

    fn dual_of(&self, x: f64) -> Vector<f64> {
        Vector::from_slice(&[x])
    }

    /// `(Γ, D_rΓ, ∂_xΓ, D_r∂_xΓ)`.
    pub fn gamma(&self, x: f64, t: f64, y: f64, s: f64) -> Result<[f64; 4]> {
        let g = self.fs.eval(&self.dual_of(x), t, &self.dual_of(y), s, true)?;
        Ok([g.value.re, g.value.du, g.gradient[0].re, g.gradient[0].du])
    }

    /// `(Φ, D_rΦ)`.
    pub fn phi(&self, x: f64, t: f64, y: f64, s: f64) -> Result<[f64; 2]> {
        let v = if self.fs.field().is_x_independent() {
            Dual::default()
        } else {
            self.fs.phi_table(&self.dual_of(y), s)?.eval(self.fs.field(), &self.dual_of(x), t)?
        };
        Ok([v.re, v.du])
    }

    /// `(K, D_rK)`.
    pub fn kernel(&self, x: f64, t: f64, y: f64, s: f64) -> Result<[f64; 2]> {
        let v = eval_k(self.fs.field(), &self.dual_of(x), t, &self.dual_of(y), s)?;
        Ok([v.re, v.du])
    }
}

/// Inflation applied to the grid maximum `ψ` in every `≤ ψ(r)·g` check.
pub const PSI_INFLATION: f64 = 1.1;

/// Pathwise check `|D_r a| ≤ K_a ψ(r)` (and the same for `∂_x a`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBound {
    /// Largest `|D_r a| / (K_a·1.1·ψ(r))` seen.
    pub max_ratio: f64,
    pub samples: usize,
}

impl CoefficientBound {
    pub fn pass(&self) -> bool {
        self.max_ratio <= 1.0
    }
}

/// Envelope fits for the chain `D_rK → D_rΦ → D_rΓ → D_r∇Γ`, each normalized
/// by `1.1·ψ(r)` and checked in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundChain {
    pub coefficient: CoefficientBound,
    pub kernel: EnvelopeFit,
    pub phi: EnvelopeFit,
    pub gamma: EnvelopeFit,
    pub grad_gamma: EnvelopeFit,
    pub points_per_path: usize,
    pub paths: usize,
}

impl BoundChain {
    pub fn links(&self) -> [(&'static str, bool); 5] {
        [
            ("coefficient", self.coefficient.pass()),
            ("kernel", self.kernel.pass()),
            ("phi", self.phi.pass()),
            ("gamma", self.gamma.pass()),
            ("grad_gamma", self.grad_gamma.pass()),
        ]
    }

    /// First failing link, if any.
    pub fn first_failure(&self) -> Option<&'static str> {
        self.links().iter().find(|l| !l.1).map(|l| l.0)
    }

    pub fn pass(&self) -> bool {
        self.first_failure().is_none()
    }
}

/// Where and how the chain is sampled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSetup {
    pub pieces: usize,
    /// Bump time `r`, a grid node.
    pub r: f64,
    pub sources: Vec<f64>,
    pub grid: FitGrid,
    pub params: GridParams,
}

/// Per-path samples `(|w|², τ, |v|/(1.1ψ))` for `[K, Φ, Γ, ∇Γ]`.
type ChainSamples = [Vec<(f64, f64, f64)>; 4];

fn chain_samples(mk: &MalliavinKernel, sources: &[f64], grid: &FitGrid, horizon: f64) -> Result<ChainSamples> {
    let scale = PSI_INFLATION * mk.psi_r;
    let mut out: ChainSamples = Default::default();
    for (w, s, t) in grid.points(1, mk.fs.field().lambda(), horizon) {
        for &y in sources {
            let x = y + w[0];
            let (w2, tau) = (w[0] * w[0], t - s);
            let k = mk.kernel(x, t, y, s)?;
            let p = mk.phi(x, t, y, s)?;
            let g = mk.gamma(x, t, y, s)?;
            out[0].push((w2, tau, k[1].abs() / scale));
            out[1].push((w2, tau, p[1].abs() / scale));
            out[2].push((w2, tau, g[1].abs() / scale));
            out[3].push((w2, tau, g[3].abs() / scale));
        }
    }
    Ok(out)
}

/// Runs the bound chain on every path of `bundle`.
pub fn bound_chain(coef: &RandomCoefficient, bundle: &PathBundle, setup: &ChainSetup) -> Result<BoundChain> {
    let k = bundle.index_of(setup.r)?;
    let horizon = bundle.horizon();
    let ka = coef.malliavin_bound();
    let fine = setup.grid.refined();
    let per_path: Vec<(f64, usize, ChainSamples, ChainSamples)> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|path| {
            let psi = bundle.psi(path)[k];
            let mut worst: f64 = 0.0;
            let mut n = 0;
            for l in k..=bundle.n_steps {
                for j in 0..=20 {
                    let x = -5.0 + 0.5 * j as f64;
                    let da = coef.malliavin_coefficient(bundle, path, x, l, k).abs();
                    let dax = coef.malliavin_coefficient_dx(bundle, path, x, l, k).abs();
                    let bound = ka * PSI_INFLATION * psi;
                    worst = worst.max(da.max(dax) / bound.max(f64::MIN_POSITIVE));
                    n += 1;
                }
            }
            let mk = MalliavinKernel::new(coef, bundle, path, setup.pieces, k, setup.params.clone())?;
            let mk_sources: Vec<(Vector<f64>, f64)> = setup
                .sources
                .iter()
                .flat_map(|&y| setup.grid.starts.iter().map(move |&s| (Vector::from_slice(&[y]), s)))
                .collect();
            if !mk.fs.field().is_x_independent() {
                mk.fs.prefetch(&mk_sources)?;
            }
            let coarse = chain_samples(&mk, &setup.sources, &setup.grid, horizon)?;
            let refined = chain_samples(&mk, &setup.sources, &fine, horizon)?;
            Ok((worst, n, coarse, refined))
        })
        .collect::<Result<_>>()?;
    let big_c = GaussianEnvelope::fixed_rate(coef.lambda, EPS_FIT);
    let fit = |idx: usize, order: usize| {
        let amp = |which: bool| {
            fit_amplitude(
                1,
                order,
                big_c,
                per_path.iter().flat_map(|p| if which { &p.3[idx] } else { &p.2[idx] }).copied(),
            )
        };
        EnvelopeFit::from_pair(amp(false), amp(true), big_c, 0.05)
    };
    Ok(BoundChain {
        coefficient: CoefficientBound {
            max_ratio: per_path.iter().map(|p| p.0).fold(0.0, f64::max),
            samples: per_path.iter().map(|p| p.1).sum(),
        },
        kernel: fit(0, 1),
        phi: fit(1, 1),
        gamma: fit(2, 0),
        grad_gamma: fit(3, 1),
        points_per_path: per_path.first().map_or(0, |p| p.3[0].len()),
        paths: per_path.len(),
    })
}
