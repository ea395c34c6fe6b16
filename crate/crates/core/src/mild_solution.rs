//! The anticipating mild solution `v(x,t) = ∫_0^t ∫ Γ(x,t,y,s) G(y,s) dy dB_s`
//! of the stochastic heat equation with a diffusion-driven coefficient.
//!
//! Two constructions are provided. The Skorohod–Riemann sum
//! `Σ u(x,t,s_i)ΔB_i − Δ Σ D_{s_i} u(x,t,s_i)` and the fractional
//! representation, which rewrites the anticipating integral through the
//! interpolation identity as a Lebesgue integral over `(z, r)` of
//! `(t−r)^{α−1} Γ(x,t,z,r)(Y + X)(z,r)` minus the trace `I₃`.
//!
//! Both run on [`PathModel`], which is specific to coefficients that do not
//! depend on `x`. Held on the path grid, such a coefficient gives a Gaussian
//! `Γ` with variance `2∫_s^t a`. The generic [`FundamentalSolution`] routes
//! ([`u_integrand`], [`malliavin_u_integrand`]) evaluate the same quantities
//! by quadrature and serve as oracles.
//!
//! `D_i` is the derivative along the increment `ΔB_i`. On the grid it sees
//! `ξ_{u_l}` only for `l > i`, so `D_i G(·, s_i) = 0` and the trace
//! correction reduces to the coefficient's dependence on the future.

use std::f64::consts::PI;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundamental_solution::{FundamentalSolution, Residual};
use crate::kernel_iteration::ConvolutionRule;
use crate::linalg::Vector;
use crate::malliavin::{PathBundle, Profile, RandomCoefficient, ScalarMap};
use crate::quadrature::{split_time_rule, trapezoid, GaussLegendre, Singular};
use crate::scalar::{Dual, Real};

/// `G(y, s) = h(ξ_s)·exp(−y²/(2ℓ²))`, with `ξ` held at the grid node at or before `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseField {
    pub amplitude: ScalarMap,
    /// `ℓ`
    pub width: f64,
    /// Decay exponent `N` of the dominating bound.
    pub decay: f64,
}

/// Sampled checks of the dominating bounds on `G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheck {
    /// `max (1+|x|)^N |G| / 𝔊`
    pub value_ratio: f64,
    /// `max (1+|x|)^N |G̃| / 𝔊`
    pub tilde_ratio: f64,
    /// `max |D_r G| / (G̃ ψ(r))`
    pub malliavin_ratio: f64,
    /// Largest `sup_t 𝔊(t)` over the paths.
    pub sup_dominating: f64,
}

impl NoiseCheck {
    pub fn pass(&self) -> bool {
        let tol = 1.0 + 1e-12;
        self.value_ratio <= tol && self.tilde_ratio <= tol && self.malliavin_ratio <= tol && self.sup_dominating.is_finite()
    }
}

impl NoiseField {
    pub fn new(amplitude: ScalarMap, width: f64, decay: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::domain(format!("noise width must be positive (got {width})")));
        }
        // d = 1
        if !(decay > 0.5) {
            return Err(Error::config("D1", format!("decay exponent N = {decay} must exceed d/2 = 0.5")));
        }
        Ok(Self { amplitude, width, decay })
    }

    /// Deterministic `G(y) = h·exp(−y²/(2ℓ²))`.
    pub fn constant(h: f64, width: f64, decay: f64) -> Result<Self> {
        Self::new(ScalarMap::constant(h), width, decay)
    }

    /// The shipped diffusion-driven noise `(1 + ½ sin ξ)·exp(−y²/2)`.
    pub fn stochastic() -> Self {
        Self { amplitude: ScalarMap::Sine { c0: 1.0, c1: 0.5, omega: 1.0, phase: 0.0 }, width: 1.0, decay: 1.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude.is_constant() && self.amplitude.value(0.0) == 0.0
    }

    pub fn is_deterministic(&self) -> bool {
        self.amplitude.is_constant()
    }

    /// Scales the amplitude.
    pub fn scaled(&self, c: f64) -> Self {
        Self { amplitude: scale_map(&self.amplitude, c), ..self.clone() }
    }

    pub fn profile(&self, y: f64) -> f64 {
        (-y * y / (2.0 * self.width * self.width)).exp()
    }

    pub fn profile_gradient(&self, y: f64) -> f64 {
        -y / (self.width * self.width) * self.profile(y)
    }

    fn hold(bundle: &PathBundle, s: f64) -> usize {
        ((s / bundle.dt + 1e-9).floor() as usize).min(bundle.n_steps)
    }

    pub fn eval(&self, bundle: &PathBundle, path: usize, y: f64, s: f64) -> f64 {
        self.amplitude.value(bundle.xi[path][Self::hold(bundle, s)]) * self.profile(y)
    }

    /// `D_{u_k} G(y, s) = h'(ξ_l)·D_{u_k}ξ_{u_l}·profile(y)` for the hold node `l > k`.
    pub fn malliavin(&self, bundle: &PathBundle, path: usize, y: f64, s: f64, k: usize) -> f64 {
        let l = Self::hold(bundle, s);
        if l <= k {
            return 0.0;
        }
        self.amplitude.eval(bundle.xi[path][l]).1 * bundle.first_variation(path, k, l) * self.profile(y)
    }

    /// `G̃(y, s) = |h'(ξ_s)|·profile(y)`, so that `|D_r G| ≤ G̃ ψ(r)`.
    pub fn tilde(&self, bundle: &PathBundle, path: usize, y: f64, s: f64) -> f64 {
        self.amplitude.eval(bundle.xi[path][Self::hold(bundle, s)]).1.abs() * self.profile(y)
    }

    /// `sup_y (1+|y|)^N·profile(y)`, attained at `y* = (√(1+4Nℓ²) − 1)/2`.
    pub fn weighted_profile_sup(&self) -> f64 {
        let n = self.decay;
        let y = ((1.0 + 4.0 * n * self.width * self.width).sqrt() - 1.0) / 2.0;
        (1.0 + y).powf(n) * self.profile(y)
    }

    /// `𝔊(u_k) = (|h| + |h'|)(ξ_k)·sup_y (1+|y|)^N profile(y)` at every node.
    pub fn dominating(&self, bundle: &PathBundle, path: usize) -> Vec<f64> {
        let sup = self.weighted_profile_sup();
        bundle.xi[path]
            .iter()
            .map(|&x| {
                let (h, dh, _) = self.amplitude.eval(x);
                (h.abs() + dh.abs()) * sup
            })
            .collect()
    }

    /// Checks the dominating bounds on `|y| ≤ 10` at every node of every path.
    pub fn check(&self, bundle: &PathBundle) -> NoiseCheck {
        let ys: Vec<f64> = (0..=80).map(|i| -10.0 + 0.25 * i as f64).collect();
        let per_path: Vec<NoiseCheck> = (0..bundle.n_paths())
            .into_par_iter()
            .map(|p| {
                let dom = self.dominating(bundle, p);
                let psi = bundle.psi(p);
                let mut c = NoiseCheck { value_ratio: 0.0, tilde_ratio: 0.0, malliavin_ratio: 0.0, sup_dominating: 0.0 };
                let stride = (bundle.n_steps / 16).max(1);
                for l in (0..=bundle.n_steps).step_by(stride) {
                    let s = bundle.time(l);
                    c.sup_dominating = c.sup_dominating.max(dom[l]);
                    for &y in &ys {
                        let w = (1.0 + y.abs()).powf(self.decay);
                        if dom[l] > 0.0 {
                            c.value_ratio = c.value_ratio.max(w * self.eval(bundle, p, y, s).abs() / dom[l]);
                            c.tilde_ratio = c.tilde_ratio.max(w * self.tilde(bundle, p, y, s) / dom[l]);
                        }
                        for k in (0..l).step_by(stride) {
                            let bound = self.tilde(bundle, p, y, s) * psi[k];
                            let d = self.malliavin(bundle, p, y, s, k).abs();
                            if d > 0.0 {
                                c.malliavin_ratio = c.malliavin_ratio.max(d / bound);
                            }
                        }
                    }
                }
                c
            })
            .collect();
        per_path.into_iter().fold(
            NoiseCheck { value_ratio: 0.0, tilde_ratio: 0.0, malliavin_ratio: 0.0, sup_dominating: 0.0 },
            |a, b| NoiseCheck {
                value_ratio: a.value_ratio.max(b.value_ratio),
                tilde_ratio: a.tilde_ratio.max(b.tilde_ratio),
                malliavin_ratio: a.malliavin_ratio.max(b.malliavin_ratio),
                sup_dominating: a.sup_dominating.max(b.sup_dominating),
            },
        )
    }
}

fn scale_map(m: &ScalarMap, c: f64) -> ScalarMap {
    match m {
        ScalarMap::Affine { c0, c1 } => ScalarMap::Affine { c0: c * c0, c1: c * c1 },
        ScalarMap::Sine { c0, c1, omega, phase } => ScalarMap::Sine { c0: c * c0, c1: c * c1, omega: *omega, phase: *phase },
        ScalarMap::Tanh { c0, c1 } => ScalarMap::Tanh { c0: c * c0, c1: c * c1 },
        ScalarMap::Sum(parts) => ScalarMap::Sum(parts.iter().map(|p| scale_map(p, c)).collect()),
    }
}

/// Integrability exponents `(p, q)` and the fractional order `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub dim: usize,
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
}

impl AlphaParams {
    /// Rejects `(p, q, d)` unless `p > q > 2d + 4`.
    pub fn check_exponents(dim: usize, p: f64, q: f64) -> Result<()> {
        let floor = 2.0 * dim as f64 + 4.0;
        if !(p > q && q > floor) {
            return Err(Error::config("D3", format!("(D3) p > q > 2d+4 violated: p = {p}, q = {q}, 2d+4 = {floor}")));
        }
        let delta = 2.0 * p * q / (p + q);
        assert_eq!(delta >= 2.0, 1.0 / p + 1.0 / q <= 1.0);
        assert!(delta > floor);
        assert!((q - 1.0) / q < 1.0 - (p + q) / (2.0 * p * q));
        Ok(())
    }

    /// The admissible open interval `(1/2 + (d+2)(p+q)/(4pq), (q−1)/q)`.
    pub fn interval(dim: usize, p: f64, q: f64) -> Result<(f64, f64)> {
        Self::check_exponents(dim, p, q)?;
        let lo = 0.5 + (dim as f64 + 2.0) * (p + q) / (4.0 * p * q);
        let hi = (q - 1.0) / q;
        assert!(lo < hi, "empty α interval under p > q > 2d+4");
        Ok((lo, hi))
    }

    pub fn new(dim: usize, p: f64, q: f64, alpha: f64) -> Result<Self> {
        let (lo, hi) = Self::interval(dim, p, q)?;
        if !(lo < alpha && alpha < hi) {
            return Err(Error::config("alpha", format!("α = {alpha} outside ({lo:.6}, {hi:.6}) required under (D3) with p = {p}, q = {q}")));
        }
        Ok(Self { dim, p, q, alpha })
    }

    pub fn midpoint(dim: usize, p: f64, q: f64) -> Result<Self> {
        let (lo, hi) = Self::interval(dim, p, q)?;
        Ok(Self { dim, p, q, alpha: 0.5 * (lo + hi) })
    }

    /// `2pq/(p+q)`, the moment order of the regularity statements.
    pub fn moment_order(&self) -> f64 {
        2.0 * self.p * self.q / (self.p + self.q)
    }

    /// `sin(πα)/π`
    pub fn prefactor(&self) -> f64 {
        (PI * self.alpha).sin() / PI
    }
}

impl Default for AlphaParams {
    fn default() -> Self {
        Self::midpoint(1, 14.0, 7.0).expect("default exponents satisfy (D3)")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SkorohodRiemann,
    FractionalRepresentation,
    ItoAdapted,
}

/// Monte Carlo estimate of `v(x, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MildSolutionEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub method: Method,
    /// Per-path values in path order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl MildSolutionEstimate {
    pub fn from_samples(method: Method, samples: Vec<f64>) -> Self {
        let (value, std_error) = mean_se(&samples);
        Self { value, std_error, n_paths: samples.len(), method, samples }
    }

    pub fn combined_se(&self, other: &Self) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// `|difference| ≤ k` combined standard errors.
    pub fn agrees(&self, other: &Self, k: f64) -> bool {
        (self.value - other.value).abs() <= k * self.combined_se(other)
    }

    /// Sample variance of the per-path values.
    pub fn variance(&self) -> f64 {
        let n = self.samples.len() as f64;
        self.samples.iter().map(|v| (v - self.value).powi(2)).sum::<f64>() / (n - 1.0)
    }
}

/// Mean and its standard error `sample-std/√n`, summed in order.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// `∫ Γ(x,t,y,s)·profile(y) dy` by a trapezoid rule of `n` nodes covering
/// both the kernel and the profile.
fn smoothed_profile<S: Real>(fs: &FundamentalSolution<S>, noise: &NoiseField, x: f64, t: f64, s: f64, n: usize) -> Result<S> {
    let sd = (2.0 * fs.field().lambda() * (t - s)).sqrt();
    let lo = (x - 9.0 * sd).min(-9.0 * noise.width);
    let hi = (x + 9.0 * sd).max(9.0 * noise.width);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let mut acc = S::zero();
    for (v, w) in trapezoid(half, n) {
        let y = mid + v;
        let g = fs.gamma(&Vector::from_slice(&[x]), t, &Vector::from_slice(&[y]), s)?;
        acc = acc + g * S::lit(w * noise.profile(y));
    }
    Ok(acc)
}

/// `u(x,t,s) = ∫ Γ(x,t,y,s) G(y,s) dy` on one path, by quadrature over `fs`.
pub fn u_integrand(fs: &FundamentalSolution<f64>, bundle: &PathBundle, path: usize, noise: &NoiseField, x: f64, t: f64, s: f64, n: usize) -> Result<f64> {
    if !(s < t) {
        return Err(Error::domain(format!("need s < t (got {s}, {t})")));
    }
    let h = noise.amplitude.value(bundle.xi[path][NoiseField::hold(bundle, s)]);
    Ok(h * smoothed_profile(fs, noise, x, t, s, n)?)
}

/// `(u, D_{u_k} u)` with `fs` built from the dual field seeded at `u_k`;
/// `D_{u_k} u = ∫ [D Γ·G + Γ·D G] dy`.
pub fn malliavin_u_integrand(fs: &FundamentalSolution<Dual>, bundle: &PathBundle, path: usize, noise: &NoiseField, k: usize, x: f64, t: f64, s: f64, n: usize) -> Result<Dual> {
    if !(s < t) {
        return Err(Error::domain(format!("need s < t (got {s}, {t})")));
    }
    let h = noise.amplitude.value(bundle.xi[path][NoiseField::hold(bundle, s)]);
    let dh = noise.malliavin(bundle, path, 0.0, s, k);
    Ok(Dual::new(h, dh) * smoothed_profile(fs, noise, x, t, s, n)?)
}

/// Volume potential `V(x,t) = ∫_0^t ∫ Γ(x,t,y,s) f(y,s) dy ds` and `∇V`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumePotential {
    pub value: f64,
    pub gradient: f64,
}

/// `V` and `∇V = ∫∫ ∇_x Γ f`; `n_s` time nodes resolving the `(t−s)^{−1/2}`
/// singularity of `∇Γ`, `n_y` spatial nodes over `±9` kernel widths.
pub fn volume_potential(fs: &FundamentalSolution<f64>, f: impl Fn(f64, f64) -> f64, x: f64, t: f64, n_s: usize, n_y: usize) -> Result<VolumePotential> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("volume potential needs t > 0 (got {t})")));
    }
    let lambda = fs.field().lambda();
    let rule = split_time_rule(0.0, t, fs.field().breakpoints(), n_s, 2, Singular::Right);
    let xv = Vector::from_slice(&[x]);
    let (mut value, mut gradient) = (0.0, 0.0);
    for (s, ws) in rule {
        let sd = (2.0 * lambda * (t - s)).sqrt();
        for (v, wy) in trapezoid(9.0, n_y) {
            let y = x + sd * v;
            let fy = f(y, s);
            if fy == 0.0 {
                continue;
            }
            let g = fs.eval(&xv, t, &Vector::from_slice(&[y]), s, true)?;
            let w = ws * wy * sd * fy;
            value += g.value * w;
            gradient += g.gradient[0] * w;
        }
    }
    Ok(VolumePotential { value, gradient })
}

/// The initial-condition term `∫ Γ(x,t,y,0) ι(y) dy`.
///
/// Fails when `Γ·|ι|` on the edge of the `±9`-width window is not negligible
/// against its peak, which is how growth faster than the kernel decay shows.
pub fn initial_condition_term(fs: &FundamentalSolution<f64>, iota: impl Fn(f64) -> f64, x: f64, t: f64, n: usize) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("initial-condition term needs t > 0 (got {t})")));
    }
    let sd = (2.0 * fs.field().lambda() * t).sqrt();
    let xv = Vector::from_slice(&[x]);
    let nodes = trapezoid(9.0, n);
    let mut total = 0.0;
    let mut peak: f64 = 0.0;
    let mut edge: f64 = 0.0;
    for (i, &(v, w)) in nodes.iter().enumerate() {
        let y = x + sd * v;
        let iy = iota(y);
        if !iy.is_finite() {
            return Err(Error::domain(format!("initial condition is not finite at y = {y}")));
        }
        let g = fs.gamma(&xv, t, &Vector::from_slice(&[y]), 0.0)?;
        let c = g * iy;
        total += c * w * sd;
        peak = peak.max(c.abs());
        if i == 0 || i + 1 == nodes.len() {
            edge = edge.max(c.abs());
        }
    }
    if edge > 1e-8 * peak.max(f64::MIN_POSITIVE) && edge > 1e-300 {
        return Err(Error::domain(format!(
            "initial condition grows too fast: Γ·|ι| = {edge:.3e} at the truncation edge (peak {peak:.3e})"
        )));
    }
    Ok(total)
}

/// Rule for `∫_s^t (t−r)^{α−1}(r−s)^{−α} f(r) dr`: the interval is halved and
/// each singular endpoint absorbed by a power substitution, so the weights
/// carry both factors.
pub fn beta_rule(s: f64, t: f64, alpha: f64, n: usize) -> Vec<(f64, f64)> {
    let gl = GaussLegendre::new(n);
    let l = 0.5 * (t - s);
    let mut rule = Vec::with_capacity(2 * n);
    // r = s + L v^{1/(1−α)}: (r−s)^{−α} dr = L^{1−α}/(1−α) dv
    for (v, w) in gl.on(0.0, 1.0) {
        let r = s + l * v.powf(1.0 / (1.0 - alpha));
        rule.push((r, w * l.powf(1.0 - alpha) / (1.0 - alpha) * (t - r).powf(alpha - 1.0)));
    }
    // r = t − L w^{1/α}: (t−r)^{α−1} dr = L^α/α dw
    for (v, w) in gl.on(0.0, 1.0) {
        let r = t - l * v.powf(1.0 / alpha);
        rule.push((r, w * l.powf(alpha) / alpha * (r - s).powf(-alpha)));
    }
    rule
}

/// Self-test of `Γ(x,t,y,s) = (sin πα/π) ∫_s^t ∫ (t−r)^{α−1}(r−s)^{−α}
/// Γ(x,t,z,r)Γ(z,r,y,s) dz dr` with `n_r` time nodes per half and `n_z`
/// spatial nodes.
pub fn interpolation_identity(fs: &FundamentalSolution<f64>, alpha: f64, x: f64, t: f64, y: f64, s: f64, n_r: usize, n_z: usize) -> Result<Residual> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::domain(format!("α must lie in (0, 1) (got {alpha})")));
    }
    let f = fs.field();
    let rule = ConvolutionRule { time: vec![], space: trapezoid(8.0, n_z), lambda: f.lambda(), dim: 1 };
    let (xv, yv) = (Vector::from_slice(&[x]), Vector::from_slice(&[y]));
    let mut total = 0.0;
    for (r, wr) in beta_rule(s, t, alpha, n_r) {
        let (center, sd) = rule.bridge(&xv, t, &yv, s, r);
        let mut inner = 0.0;
        rule.for_each_space(&center, sd, |z, w| {
            inner += fs.gamma(&xv, t, z, r)? * fs.gamma(z, r, &yv, s)? * w;
            Ok(())
        })?;
        total += wr * inner;
    }
    let value = (PI * alpha).sin() / PI * total;
    Ok(Residual::new(value, fs.gamma(&xv, t, &yv, s)?))
}

/// Time nodes for the outer integral of the fractional representation:
/// `(cell j, r, weight·(t−r)^{α−1})` over `[0, u_m]`.
///
/// Each cell uses `r = u_j + L v^{1/(1−α)}`, which makes the
/// `(r−u_j)^{1−α}` kinks of the partial-cell weights smooth; the last cell
/// is halved and its right half takes `r = t − L w^{1/α}`.
fn fractional_time_rule(dt: f64, m: usize, alpha: f64, n: usize) -> Vec<(usize, f64, f64)> {
    let gl = GaussLegendre::new(n);
    let t = m as f64 * dt;
    let mut out = Vec::with_capacity((m + 1) * n);
    let left = |out: &mut Vec<(usize, f64, f64)>, j: usize, a: f64, l: f64| {
        let e = 1.0 / (1.0 - alpha);
        for (v, w) in gl.on(0.0, 1.0) {
            let r = a + l * v.powf(e);
            let jac = l * e * v.powf(e - 1.0);
            out.push((j, r, w * jac * (t - r).powf(alpha - 1.0)));
        }
    };
    for j in 0..m.saturating_sub(1) {
        left(&mut out, j, j as f64 * dt, dt);
    }
    if m > 0 {
        let j = m - 1;
        let l = 0.5 * dt;
        left(&mut out, j, j as f64 * dt, l);
        // smooth factors enter as functions of w^{1/α}, only C¹ at w = 0
        let gl = GaussLegendre::new(4 * n);
        for (v, w) in gl.on(0.0, 1.0) {
            let r = t - l * v.powf(1.0 / alpha);
            out.push((j, r, w * l.powf(alpha) / alpha));
        }
    }
    out
}

/// One path of an `x`-independent coefficient held on every grid cell,
/// with the closed-form kernel and the prefix sums behind `∫a` and `D_i∫a`.
pub struct PathModel<'a> {
    bundle: &'a PathBundle,
    path: usize,
    noise: &'a NoiseField,
    dt: f64,
    n: usize,
    /// `a(ξ_l)` on cell `l`
    a: Vec<f64>,
    /// `∂_ξ a(ξ_l)·D_{u_i}ξ_{u_l}` is read as `da[l]·first_variation(i, l)`
    da: Vec<f64>,
    /// `∫_0^{u_j} a`
    cum: Vec<f64>,
    /// `dcum[i][j] = ∫_0^{u_j} D_i a` for `j > i`, stored from `j = i + 1`
    dcum: Vec<Vec<f64>>,
    h: Vec<f64>,
}

impl<'a> PathModel<'a> {
    pub fn new(coef: &RandomCoefficient, bundle: &'a PathBundle, path: usize, noise: &'a NoiseField) -> Result<Self> {
        if !coef.is_x_independent() {
            return Err(Error::Unsupported("the mild-solution estimators need an x-independent coefficient".into()));
        }
        // rejects held values outside the ellipticity band
        coef.realize(bundle, path, bundle.n_steps)?;
        let (n, dt) = (bundle.n_steps, bundle.dt);
        let xi = &bundle.xi[path];
        let (mut a, mut da) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for &x in &xi[..n] {
            let (mut v, mut dv) = (0.0, 0.0);
            for term in &coef.terms {
                debug_assert_eq!(term.profile, Profile::One);
                let (f, df, _) = term.factor.eval(x);
                v += f;
                dv += df;
            }
            a.push(v);
            da.push(dv);
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for l in 0..n {
            cum.push(cum[l] + a[l] * dt);
        }
        let dcum = (0..n)
            .map(|i| {
                let mut row = Vec::with_capacity(n - i);
                let mut acc = 0.0;
                row.push(acc);
                for l in i + 1..n {
                    acc += da[l] * bundle.first_variation(path, i, l) * dt;
                    row.push(acc);
                }
                row
            })
            .collect();
        let h = xi.iter().map(|&x| noise.amplitude.value(x)).collect();
        Ok(Self { bundle, path, noise, dt, n, a, da, cum, dcum, h })
    }

    pub fn bundle(&self) -> &PathBundle {
        self.bundle
    }

    pub fn path(&self) -> usize {
        self.path
    }

    fn cell(&self, r: f64) -> usize {
        ((r / self.dt).floor() as usize).min(self.n - 1)
    }

    /// `∫_0^r a`
    fn big_a(&self, r: f64) -> f64 {
        let j = self.cell(r);
        self.cum[j] + (r - j as f64 * self.dt) * self.a[j]
    }

    /// `∫_s^r a`
    pub fn int_a(&self, s: f64, r: f64) -> f64 {
        self.big_a(r) - self.big_a(s)
    }

    /// `∫_0^r D_{u_i} a`
    fn d_big_a(&self, i: usize, r: f64) -> f64 {
        let j = self.cell(r);
        if j <= i {
            return 0.0;
        }
        self.dcum[i][j - i - 1] + (r - j as f64 * self.dt) * self.da[j] * self.bundle.first_variation(self.path, i, j)
    }

    /// `D_{u_i} a` on cell `l`.
    pub fn malliavin_a(&self, i: usize, l: usize) -> f64 {
        if l <= i {
            0.0
        } else {
            self.da[l] * self.bundle.first_variation(self.path, i, l)
        }
    }

    pub fn a(&self, l: usize) -> f64 {
        self.a[l]
    }

    /// Closed-form `Γ(x,t,z,r)`.
    pub fn gamma(&self, x: f64, t: f64, z: f64, r: f64) -> f64 {
        let v = 2.0 * self.int_a(r, t);
        (-(x - z) * (x - z) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }

    /// `(u, D_{u_i} u)(x, t, u_i)` with `t ≥ u_i`; at `t = u_i` this is `G`.
    pub fn u(&self, x: f64, t: f64, i: usize) -> Dual {
        let s = i as f64 * self.dt;
        let v = Dual::new(2.0 * self.int_a(s, t), 2.0 * self.d_big_a(i, t));
        let l2 = self.noise.width * self.noise.width;
        let w = v + Dual::constant(l2);
        let amp = Dual::constant(self.h[i] * self.noise.width) / w.sqrt();
        amp * (Dual::constant(-x * x) / (Dual::constant(2.0) * w)).exp()
    }

    /// `∂_x` of [`Self::u`].
    pub fn u_gradient(&self, x: f64, t: f64, i: usize) -> Dual {
        let s = i as f64 * self.dt;
        let v = Dual::new(2.0 * self.int_a(s, t), 2.0 * self.d_big_a(i, t));
        let w = v + Dual::constant(self.noise.width * self.noise.width);
        Dual::constant(-x) / w * self.u(x, t, i)
    }

    fn check_node(&self, t: f64) -> Result<usize> {
        let m = self.bundle.index_of(t)?;
        if m == 0 {
            return Err(Error::domain("v(x, 0) = 0; need t > 0"));
        }
        Ok(m)
    }

    /// `(Σ u ΔB_i, Δ Σ D_i u)` at `(x, u_m)`.
    pub fn riemann_parts(&self, x: f64, t: f64) -> Result<(f64, f64)> {
        let m = self.check_node(t)?;
        let db = &self.bundle.increments[self.path];
        let (mut fwd, mut corr) = (0.0, 0.0);
        for i in 0..m {
            let u = self.u(x, t, i);
            fwd += u.re * db[i];
            corr += u.du * self.dt;
        }
        Ok((fwd, corr))
    }

    /// Skorohod–Riemann value of `v(x, t)` on this path.
    pub fn skorohod(&self, x: f64, t: f64) -> Result<f64> {
        let (f, c) = self.riemann_parts(x, t)?;
        Ok(f - c)
    }

    /// `c_i(r) = Δ^{-1} ∫_{cell i ∩ [0,r]} (r−s)^{−α} ds`.
    fn cell_weight(&self, i: usize, r: f64, alpha: f64) -> f64 {
        let lo = i as f64 * self.dt;
        if r <= lo {
            return 0.0;
        }
        let hi = ((i + 1) as f64 * self.dt).min(r);
        let e = 1.0 - alpha;
        ((r - lo).powf(e) - (r - hi).powf(e)) / (e * self.dt)
    }

    /// `(Y, X)(z, r)`: the corrected sum of the `α`-weighted integrand and its
    /// Lebesgue counterpart `∫ (r−s)^{−α} D_sΓ·G`, with `cells` the number of
    /// grid cells meeting `[0, r)`.
    fn y_x(&self, z: f64, r: f64, alpha: f64, cells: usize) -> (f64, f64) {
        let db = &self.bundle.increments[self.path];
        let (mut y, mut x) = (0.0, 0.0);
        for i in 0..cells {
            let c = self.cell_weight(i, r, alpha);
            let u = self.u(z, r, i);
            // D_i G(·, u_i) = 0, so D_i u is all D_iΓ·G
            y += c * (u.re * db[i] - self.dt * u.du);
            x += c * self.dt * u.du;
        }
        (y, x)
    }

    /// `Y(z, r)` for any `r ∈ (0, T]`.
    pub fn y_field(&self, z: f64, r: f64, alpha: f64) -> f64 {
        let cells = ((r / self.dt).ceil() as usize).min(self.n);
        self.y_x(z, r, alpha, cells).0
    }

    /// `X(z, r)` for any `r ∈ (0, T]`.
    pub fn x_field(&self, z: f64, r: f64, alpha: f64) -> f64 {
        let cells = ((r / self.dt).ceil() as usize).min(self.n);
        self.y_x(z, r, alpha, cells).1
    }

    /// The three terms of the fractional representation at `(x, u_m)`.
    pub fn fractional(&self, x: f64, t: f64, ap: &AlphaParams, rule: &FractionalRule) -> Result<FractionalParts> {
        let m = self.check_node(t)?;
        let alpha = ap.alpha;
        let ell = self.noise.width;
        let (mut i1, mut i2) = (0.0, 0.0);
        for (j, r, wr) in fractional_time_rule(self.dt, m, alpha, rule.n_r) {
            let sd = (2.0 * self.int_a(r, t)).sqrt();
            let hz = sd.min(ell) / rule.z_density;
            let half = rule.z_half_width * sd;
            let nz = ((2.0 * half / hz).ceil() as usize + 1).max(rule.min_z);
            let (mut sy, mut sx) = (0.0, 0.0);
            for (v, wz) in trapezoid(half, nz) {
                let z = x + v;
                let g = self.gamma(x, t, z, r) * wz;
                let (y, xx) = self.y_x(z, r, alpha, j + 1);
                sy += g * y;
                sx += g * xx;
            }
            i1 += wr * sy;
            i2 += wr * sx;
        }
        let c = ap.prefactor();
        let i3 = self.riemann_parts(x, t)?.1;
        Ok(FractionalParts { i1: c * i1, i2: c * i2, i3 })
    }

    /// Sampled left-hand side of the volume-potential hypothesis for
    /// `g = Y`: `∫_0^t ∫ [Γ + |∇Γ|](x,t,z,r) |Y(z,r)|^κ dz dr`.
    pub fn potential_hypothesis(&self, x: f64, t: f64, alpha: f64, kappa: f64, n_r: usize, n_z: usize) -> Result<f64> {
        self.check_node(t)?;
        let rule = split_time_rule(0.0, t, &[], n_r, 2, Singular::Right);
        let mut total = 0.0;
        for (r, wr) in rule {
            let var = 2.0 * self.int_a(r, t);
            let sd = var.sqrt();
            let mut inner = 0.0;
            for (v, wz) in trapezoid(8.0 * sd, n_z) {
                let z = x + v;
                let g = self.gamma(x, t, z, r);
                let dg = (x - z).abs() / var * g;
                inner += wz * (g + dg) * self.y_field(z, r, alpha).abs().powf(kappa);
            }
            total += wr * inner;
        }
        Ok(total)
    }
}

/// Spatial and temporal resolution of the fractional representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FractionalRule {
    /// Gauss–Legendre nodes per time piece.
    pub n_r: usize,
    /// Trapezoid nodes per `min(kernel sd, ℓ)`.
    pub z_density: f64,
    /// Half-width of the `z` window in kernel standard deviations.
    pub z_half_width: f64,
    pub min_z: usize,
}

impl Default for FractionalRule {
    fn default() -> Self {
        Self { n_r: 10, z_density: 1.5, z_half_width: 7.0, min_z: 9 }
    }
}

/// `v = I₁ + I₂ − I₃`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionalParts {
    /// `(sin πα/π)∫∫(t−r)^{α−1}Γ·Y`
    pub i1: f64,
    /// `(sin πα/π)∫∫(t−r)^{α−1}Γ·X`
    pub i2: f64,
    /// `∫∫ D_sΓ·G dy ds`
    pub i3: f64,
}

impl FractionalParts {
    pub fn value(&self) -> f64 {
        self.i1 + self.i2 - self.i3
    }
}

fn per_path<F>(coef: &RandomCoefficient, bundle: &PathBundle, noise: &NoiseField, f: F) -> Result<Vec<f64>>
where
    F: Fn(&PathModel) -> Result<f64> + Sync,
{
    (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| f(&PathModel::new(coef, bundle, p, noise)?))
        .collect()
}

/// Skorohod–Riemann estimate of `v(x, t)`.
pub fn skorohod_integral(coef: &RandomCoefficient, bundle: &PathBundle, noise: &NoiseField, x: f64, t: f64) -> Result<MildSolutionEstimate> {
    let samples = per_path(coef, bundle, noise, |m| m.skorohod(x, t))?;
    Ok(MildSolutionEstimate::from_samples(Method::SkorohodRiemann, samples))
}

/// The uncorrected forward sum `Σ u(x,t,s_i) ΔB_i`.
pub fn ito_adapted(coef: &RandomCoefficient, bundle: &PathBundle, noise: &NoiseField, x: f64, t: f64) -> Result<MildSolutionEstimate> {
    let samples = per_path(coef, bundle, noise, |m| Ok(m.riemann_parts(x, t)?.0))?;
    Ok(MildSolutionEstimate::from_samples(Method::ItoAdapted, samples))
}

/// Fractional-representation estimate of `v(x, t)`.
pub fn fractional_representation(
    coef: &RandomCoefficient,
    bundle: &PathBundle,
    noise: &NoiseField,
    x: f64,
    t: f64,
    ap: &AlphaParams,
    rule: &FractionalRule,
) -> Result<MildSolutionEstimate> {
    AlphaParams::new(ap.dim, ap.p, ap.q, ap.alpha)?;
    let samples = per_path(coef, bundle, noise, |m| Ok(m.fractional(x, t, ap, rule)?.value()))?;
    Ok(MildSolutionEstimate::from_samples(Method::FractionalRepresentation, samples))
}

/// `∫_0^t (∫ u(x,t,s)² ds)` for a deterministic coefficient and noise: the
/// variance of `v(x,t)`, by Gauss–Legendre in `s` on the path's own grid.
pub fn deterministic_variance(model: &PathModel, x: f64, t: f64, n_per_cell: usize) -> Result<f64> {
    let m = model.check_node(t)?;
    let gl = GaussLegendre::new(n_per_cell);
    let dt = model.dt;
    let ell2 = model.noise.width * model.noise.width;
    let h = model.h[0];
    let mut total = 0.0;
    for j in 0..m {
        for (s, w) in gl.on(j as f64 * dt, (j + 1) as f64 * dt) {
            let w2 = 2.0 * model.int_a(s, t) + ell2;
            let u = h * model.noise.width / w2.sqrt() * (-x * x / (2.0 * w2)).exp();
            total += w * u * u;
        }
    }
    Ok(total)
}

/// Smooth bump `φ(x) = exp(−1/(1−ρ²))`, `ρ = (x−c)/r`, supported on `(c−r, c+r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpFunction {
    pub center: f64,
    pub radius: f64,
}

impl BumpFunction {
    /// `(φ, φ')`
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let rho = (x - self.center) / self.radius;
        let q = 1.0 - rho * rho;
        if q <= 0.0 {
            return (0.0, 0.0);
        }
        let phi = (-1.0 / q).exp();
        (phi, phi * (-2.0 * rho / (q * q)) / self.radius)
    }
}

/// Test function and spatial grid of the weak formulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakForm {
    pub test: BumpFunction,
    /// Trapezoid intervals across the support of `φ`.
    pub nx: usize,
    /// Half-width of the box the support must fit in.
    pub box_half_width: f64,
}

/// Terms of the weak-form residual on one path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    /// `∫ v(x,t) φ(x) dx`
    pub mass: f64,
    /// `∫_0^t ∫ a ∇v·∇φ dx ds`
    pub flux: f64,
    /// `Σ (∫ φ G(·,s_i)) ΔB_i`
    pub noise: f64,
    /// `Δ Σ_i ∫_{s_i}^t ∫ D_i a ∇u(x,s,s_i)·∇φ dx ds`
    pub trace: f64,
}

impl WeakResidual {
    /// `R = J − ∫∫ φG dB` with `J = mass + flux`.
    pub fn residual(&self) -> f64 {
        self.mass + self.flux - self.noise
    }

    /// `R` less the trace term that the product `a·∇v` of a random
    /// coefficient with a Skorohod integral leaves behind.
    pub fn reduced(&self) -> f64 {
        self.residual() - self.trace
    }
}

impl<'a> PathModel<'a> {
    /// Weak-form residual at the node `t`.
    ///
    /// Time integrals are trapezoidal per cell with one-sided limits: `a` is
    /// constant on the cell and `v(s_j^+)` already contains the `i = j`
    /// term, for which `u(x, s_j, s_j) = G(x, s_j)`.
    pub fn weak_residual(&self, form: &WeakForm, t: f64) -> Result<WeakResidual> {
        let m = self.check_node(t)?;
        let phi = &form.test;
        if phi.center - phi.radius < -form.box_half_width || phi.center + phi.radius > form.box_half_width {
            return Err(Error::domain(format!(
                "test function support [{}, {}] exceeds the box ±{}",
                phi.center - phi.radius,
                phi.center + phi.radius,
                form.box_half_width
            )));
        }
        if form.nx < 2 {
            return Err(Error::domain("weak form needs at least two spatial intervals"));
        }
        let hx = 2.0 * phi.radius / form.nx as f64;
        // interior nodes only: φ vanishes at the ends with all derivatives
        let xs: Vec<(f64, f64, f64)> = (1..form.nx)
            .map(|k| {
                let x = phi.center - phi.radius + k as f64 * hx;
                let (p, dp) = phi.eval(x);
                (x, p * hx, dp * hx)
            })
            .collect();
        let db = &self.bundle.increments[self.path];
        let dt = self.dt;
        // ∫ ∇u(·,s,s_i)·∇φ as (value, D_i value)
        let flux_term = |s: f64, i: usize| -> Dual {
            let mut acc = Dual::constant(0.0);
            for &(x, _, dw) in &xs {
                acc = acc + self.u_gradient(x, s, i) * Dual::constant(dw);
            }
            acc
        };
        let mut mass = 0.0;
        for &(x, w, _) in &xs {
            let mut v = 0.0;
            for i in 0..m {
                let u = self.u(x, t, i);
                v += u.re * db[i] - dt * u.du;
            }
            mass += w * v;
        }
        let (mut flux, mut trace) = (0.0, 0.0);
        for j in 0..m {
            let (s0, s1) = (j as f64 * dt, (j + 1) as f64 * dt);
            let mut g = 0.0;
            for i in 0..=j {
                for s in [s0, s1] {
                    let q = flux_term(s, i);
                    g += q.re * db[i] - dt * q.du;
                    if i < j {
                        trace += 0.5 * dt * dt * self.malliavin_a(i, j) * q.re;
                    }
                }
            }
            flux += 0.5 * dt * self.a[j] * g;
        }
        let phi_g: f64 = xs.iter().map(|&(x, w, _)| w * self.noise.profile(x)).sum();
        let noise = (0..m).map(|i| self.h[i] * phi_g * db[i]).sum();
        Ok(WeakResidual { mass, flux, noise, trace })
    }
}

/// `E[R²]` and the trace-reduced `E[(R − T)²]` over the bundle, with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualStats {
    pub mean_sq: f64,
    pub mean_sq_se: f64,
    pub reduced_mean_sq: f64,
    pub reduced_mean_sq_se: f64,
    pub trace_mean_sq: f64,
    #[serde(skip)]
    pub residuals: Vec<WeakResidual>,
}

pub fn weak_solution_residual(coef: &RandomCoefficient, bundle: &PathBundle, noise: &NoiseField, form: &WeakForm, t: f64) -> Result<WeakResidualStats> {
    let residuals: Vec<WeakResidual> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| PathModel::new(coef, bundle, p, noise)?.weak_residual(form, t))
        .collect::<Result<_>>()?;
    let sq: Vec<f64> = residuals.iter().map(|r| r.residual().powi(2)).collect();
    let red: Vec<f64> = residuals.iter().map(|r| r.reduced().powi(2)).collect();
    let tr: Vec<f64> = residuals.iter().map(|r| r.trace.powi(2)).collect();
    let (mean_sq, mean_sq_se) = mean_se(&sq);
    let (reduced_mean_sq, reduced_mean_sq_se) = mean_se(&red);
    Ok(WeakResidualStats { mean_sq, mean_sq_se, reduced_mean_sq, reduced_mean_sq_se, trace_mean_sq: mean_se(&tr).0, residuals })
}

/// `E[sup_x |v(x,t)|^κ]` with the sup taken over `xs` (a lower bound for the
/// sup over all `x`), from the Skorohod–Riemann values.
pub fn sampled_sup_moment(coef: &RandomCoefficient, bundle: &PathBundle, noise: &NoiseField, xs: &[f64], t: f64, kappa: f64) -> Result<(f64, f64)> {
    let samples = per_path(coef, bundle, noise, |m| {
        xs.iter().try_fold(0.0f64, |acc, &x| Ok(acc.max(m.skorohod(x, t)?.abs().powf(kappa))))
    })?;
    Ok(mean_se(&samples))
}

/// Log-log fit of a sampled moment against the horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub horizons: Vec<f64>,
    pub moments: Vec<f64>,
    pub slope: f64,
    /// All moments vanish (`G ≡ 0`).
    pub trivial: bool,
}

impl DecayFit {
    pub fn pass(&self) -> bool {
        self.trivial || self.slope > 0.0
    }
}

/// Least-squares slope of `log moment` against `log h`.
pub fn small_time_decay(points: &[(f64, f64)]) -> Result<DecayFit> {
    if points.len() < 2 {
        return Err(Error::domain("decay fit needs at least two horizons"));
    }
    let horizons = points.iter().map(|p| p.0).collect();
    let moments: Vec<f64> = points.iter().map(|p| p.1).collect();
    if moments.iter().all(|&m| m == 0.0) {
        return Ok(DecayFit { horizons, moments, slope: 0.0, trivial: true });
    }
    if points.iter().any(|&(h, m)| !(h > 0.0 && m > 0.0)) {
        return Err(Error::domain("decay fit needs positive horizons and moments"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(DecayFit { horizons, moments, slope: sxy / sxx, trivial: false })
}
