//! Frozen-coefficient Gaussian kernel `Z(w; A)` and its derivatives.
//!
//! With `A = sym ∫_s^t a(𝔷,u) du`, `B = A⁻¹/2` and `g = -B w`:
//!
//! ```text
//! Z       = (4π)^{-d/2} det(A)^{-1/2} exp(-⟨A⁻¹w, w⟩/4)
//! ∂_i Z   = Z g_i
//! ∂_ij Z  = Z (g_i g_j - B_ij)
//! ∂_ijk Z = Z (g_i g_j g_k - B_ij g_k - B_ik g_j - B_jk g_i)
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::coeff_fields::CoefficientField;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3, Vector};
use crate::scalar::Real;

/// `g_{c,C}(x,t) = c·t^{-d/2}·exp(-C|x|²/t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnvelope {
    pub c: f64,
    #[serde(rename = "C")]
    pub big_c: f64,
}

impl GaussianEnvelope {
    pub fn new(c: f64, big_c: f64) -> Self {
        Self { c, big_c }
    }

    pub fn eval(&self, dim: usize, w2: f64, tau: f64) -> f64 {
        self.c * tau.powf(-0.5 * dim as f64) * (-self.big_c * w2 / tau).exp()
    }

    /// Decay rate used by every fit: `1/(4λ(1+ε))`.
    pub fn fixed_rate(lambda: f64, eps_fit: f64) -> f64 {
        1.0 / (4.0 * lambda * (1.0 + eps_fit))
    }
}

pub const EPS_FIT: f64 = 0.01;

/// Derivative orders requested from [`eval_z`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value = 0,
    Gradient = 1,
    Hessian = 2,
    Third = 3,
}

#[derive(Clone, Copy, Debug)]
pub struct ParametrixValue<S> {
    pub value: S,
    pub gradient: Vector<S>,
    pub hessian: Matrix<S>,
    pub third: Tensor3<S>,
}

impl<S: Real> ParametrixValue<S> {
    /// Norm of the order-`k` derivative: Euclidean for the gradient,
    /// entrywise sup for the higher tensors.
    pub fn norm(&self, k: usize) -> f64 {
        match k {
            0 => self.value.size(),
            1 => self.gradient.as_slice().iter().map(|g| g.re() * g.re()).sum::<f64>().sqrt(),
            2 => self.hessian.max_abs(),
            _ => self.third.max_abs(),
        }
    }
}

/// `(4π)^{-d/2}` for `d = 0..=3`.
const NORMALISER: [f64; 4] = [1.0, 0.282_094_791_773_878_14, 0.079_577_471_545_947_67, 0.022_448_390_265_645_82];

/// Gaussian normaliser and `B = A⁻¹/2` for a frozen matrix.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFactor<S> {
    pub norm: S,
    pub b: Matrix<S>,
}

impl<S: Real> GaussianFactor<S> {
    pub fn new(a: &Matrix<S>) -> Result<Self> {
        let det = a.det();
        if !(det.re() > 0.0) {
            return Err(Error::domain(format!("frozen matrix not positive definite (det = {})", det.re())));
        }
        let inv = a.inverse().ok_or_else(|| Error::domain("singular frozen matrix"))?;
        let norm = S::lit(NORMALISER[a.dim]) / det.sqrt();
        Ok(Self { norm, b: inv.scale(S::lit(0.5)) })
    }

    #[inline]
    pub fn value(&self, w: &Vector<f64>) -> S {
        let d = self.b.dim;
        let mut q = S::zero();
        for i in 0..d {
            for j in 0..d {
                q = q + self.b.m[i][j] * S::lit(w[i] * w[j]);
            }
        }
        self.norm * (-S::lit(0.5) * q).exp()
    }

    #[inline]
    fn g(&self, w: &Vector<f64>) -> Vector<S> {
        let d = self.b.dim;
        let mut g = Vector::zeros(d);
        for i in 0..d {
            g[i] = -(0..d).fold(S::zero(), |acc, j| acc + self.b.m[i][j] * S::lit(w[j]));
        }
        g
    }

    pub fn eval(&self, w: &Vector<f64>, order: Order) -> ParametrixValue<S> {
        let d = self.b.dim;
        let z = self.value(w);
        let mut out = ParametrixValue {
            value: z,
            gradient: Vector::zeros(d),
            hessian: Matrix::zeros(d),
            third: Tensor3::zeros(d),
        };
        if order == Order::Value {
            return out;
        }
        let g = self.g(w);
        let b = &self.b.m;
        for i in 0..d {
            out.gradient[i] = z * g[i];
        }
        if order >= Order::Hessian {
            for i in 0..d {
                for j in 0..d {
                    out.hessian.m[i][j] = z * (g[i] * g[j] - b[i][j]);
                }
            }
        }
        if order >= Order::Third {
            for i in 0..d {
                for j in 0..d {
                    for k in 0..d {
                        out.third.t[i][j][k] =
                            z * (g[i] * g[j] * g[k] - b[i][j] * g[k] - b[i][k] * g[j] - b[j][k] * g[i]);
                    }
                }
            }
        }
        out
    }
}

/// `Z(w; A)` and derivatives up to `order`.
pub fn eval_z<S: Real>(a: &Matrix<S>, w: &Vector<f64>, order: Order) -> Result<ParametrixValue<S>> {
    Ok(GaussianFactor::new(a)?.eval(w, order))
}

/// `Trace[DA · ∂²Z(w; A)]` for one noise component.
pub fn malliavin_z<S: Real>(a: &Matrix<S>, da: &Matrix<S>, w: &Vector<f64>) -> Result<S> {
    let pv = eval_z(a, w, Order::Hessian)?;
    Ok(da.trace_product(&pv.hessian))
}

/// [`malliavin_z`] for each noise component `DA_j`.
pub fn malliavin_z_components<S: Real>(a: &Matrix<S>, da: &[Matrix<S>], w: &Vector<f64>) -> Result<Vec<S>> {
    let pv = eval_z(a, w, Order::Hessian)?;
    Ok(da.iter().map(|m| m.trace_product(&pv.hessian)).collect())
}

/// Sample points `(w, s, t)` for envelope fits.
///
/// Offsets are laid out in similarity units `u = |w|/√(λ(t-s))` on
/// `[0, u_max]` along a fixed set of directions, so the fit never reaches
/// into the far tail where relative errors of any numerical kernel blow up
/// after multiplication by `exp(C|w|²/τ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitGrid {
    pub starts: Vec<f64>,
    pub taus: Vec<f64>,
    pub n_u: usize,
    pub u_max: f64,
    pub n_dir: usize,
}

impl FitGrid {
    /// `n_tau` durations geometrically spaced in `[tau_min, tau_max]`.
    pub fn geometric(starts: Vec<f64>, tau_min: f64, tau_max: f64, n_tau: usize, n_u: usize, u_max: f64) -> Self {
        let taus = (0..n_tau)
            .map(|k| {
                let f = if n_tau == 1 { 1.0 } else { k as f64 / (n_tau - 1) as f64 };
                tau_min * (tau_max / tau_min).powf(f)
            })
            .collect();
        Self { starts, taus, n_u, u_max, n_dir: 4 }
    }

    /// Same extent with twice as many durations and offsets.
    pub fn refined(&self) -> Self {
        let n_tau = 2 * self.taus.len() - 1;
        let (lo, hi) = (self.taus[0], *self.taus.last().unwrap());
        let mut g = Self::geometric(self.starts.clone(), lo, hi, n_tau, 2 * self.n_u - 1, self.u_max);
        g.n_dir = 2 * self.n_dir;
        g
    }

    /// Unit directions in ℝ^d (d = 2 spans the circle; higher d uses axes).
    pub fn directions(&self, dim: usize) -> Vec<Vector<f64>> {
        match dim {
            1 => vec![Vector::from_slice(&[1.0]), Vector::from_slice(&[-1.0])],
            2 => (0..self.n_dir)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / self.n_dir as f64;
                    Vector::from_slice(&[th.cos(), th.sin()])
                })
                .collect(),
            _ => (0..dim)
                .map(|i| {
                    let mut e = Vector::zeros(dim);
                    e[i] = 1.0;
                    e
                })
                .collect(),
        }
    }

    pub fn offsets(&self) -> Vec<f64> {
        (0..self.n_u).map(|k| self.u_max * k as f64 / (self.n_u - 1).max(1) as f64).collect()
    }

    /// All `(w, s, t)` triples, with `w = u·√(λτ)·e`, `t ≤ horizon`.
    pub fn points(&self, dim: usize, lambda: f64, horizon: f64) -> Vec<(Vector<f64>, f64, f64)> {
        let dirs = self.directions(dim);
        let us = self.offsets();
        let mut pts = Vec::new();
        for &s in &self.starts {
            for &tau in &self.taus {
                if s + tau > horizon + 1e-12 {
                    continue;
                }
                let scale = (lambda * tau).sqrt();
                for e in &dirs {
                    for &u in &us {
                        pts.push((e.scale(u * scale), s, s + tau));
                    }
                }
            }
        }
        pts
    }
}

/// Smallest amplitude `c` with `τ^{k/2}·|v| ≤ g_{c,C}(w, τ)` on the samples.
pub fn fit_amplitude(dim: usize, order: usize, big_c: f64, samples: impl IntoIterator<Item = (f64, f64, f64)>) -> f64 {
    samples
        .into_iter()
        .map(|(w2, tau, v)| tau.powf(0.5 * (order + dim) as f64) * v.abs() * (big_c * w2 / tau).exp())
        .fold(0.0, f64::max)
}

/// Result of a one-parameter envelope fit and its refinement check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub envelope: GaussianEnvelope,
    pub refined_c: f64,
    pub drift: f64,
    pub stable: bool,
    pub finite: bool,
}

impl EnvelopeFit {
    pub fn from_pair(c: f64, refined_c: f64, big_c: f64, tol: f64) -> Self {
        let drift = if c > 0.0 { (refined_c / c - 1.0).abs() } else if refined_c == 0.0 { 0.0 } else { f64::INFINITY };
        let finite = c.is_finite() && refined_c.is_finite();
        Self { envelope: GaussianEnvelope::new(c, big_c), refined_c, drift, stable: finite && drift < tol, finite }
    }

    pub fn pass(&self) -> bool {
        self.finite && self.stable
    }
}

/// Fits `|∂^k Z| ≤ (t-s)^{-k/2} g_{ς,ϖ}` for the frozen integrals of `field`
/// at the point `z`, and repeats on the refined grid.
pub fn envelope_check_z(field: &CoefficientField<f64>, z: &Vector<f64>, order: usize, grid: &FitGrid, horizon: f64) -> Result<EnvelopeFit> {
    let big_c = GaussianEnvelope::fixed_rate(field.lambda(), EPS_FIT);
    let fit = |g: &FitGrid| -> Result<f64> {
        let ord = match order {
            0 => Order::Value,
            1 => Order::Gradient,
            2 => Order::Hessian,
            _ => Order::Third,
        };
        let mut samples = Vec::new();
        for (w, s, t) in g.points(field.dim(), field.lambda(), horizon) {
            let a = field.integrate_in_time(z, s, t)?;
            let v = eval_z(&a.a, &w, ord)?;
            samples.push((w.norm2(), t - s, v.norm(order)));
        }
        Ok(fit_amplitude(field.dim(), order, big_c, samples))
    };
    let c = fit(grid)?;
    let refined = fit(&grid.refined())?;
    // ratio of fits under 2× refinement must stay below 1.05
    Ok(EnvelopeFit::from_pair(c, refined, big_c, 0.05))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dual;
    use approx::assert_relative_eq;

    fn m1(a: f64) -> Matrix<f64> {
        Matrix::scalar(1, a)
    }

    #[test]
    fn unit_heat_kernel_at_origin() {
        let v = eval_z(&m1(1.0), &Vector::from_slice(&[0.0]), Order::Third).unwrap();
        assert_relative_eq!(v.value, (4.0 * PI).powf(-0.5), max_relative = 1e-15);
        assert_eq!(v.gradient[0], 0.0);
        assert!(eval_z(&m1(0.0), &Vector::from_slice(&[0.0]), Order::Value).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let a = Matrix::<f64>::from_rows(&[vec![1.3, 0.2], vec![0.2, 0.7]]);
        let w = Vector::from_slice(&[0.4, -0.9]);
        let h = 1e-4;
        let f = |w: &Vector<f64>| eval_z(&a, w, Order::Third).unwrap();
        let base = f(&w);
        for k in 0..2 {
            let mut e = Vector::zeros(2);
            e[k] = h;
            let (p, m) = (f(&(w + e)), f(&(w - e)));
            assert_relative_eq!(base.gradient[k], (p.value - m.value) / (2.0 * h), max_relative = 1e-6);
            for i in 0..2 {
                assert_relative_eq!(base.hessian.m[i][k], (p.gradient[i] - m.gradient[i]) / (2.0 * h), max_relative = 1e-6);
                for j in 0..2 {
                    assert_relative_eq!(
                        base.third.t[i][j][k],
                        (p.hessian.m[i][j] - m.hessian.m[i][j]) / (2.0 * h),
                        max_relative = 1e-6,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn trace_formula_is_directional_derivative_in_a() {
        let a = Matrix::<f64>::from_rows(&[vec![1.3, 0.2], vec![0.2, 0.7]]);
        let da = Matrix::<f64>::from_rows(&[vec![0.5, -0.1], vec![-0.1, 0.3]]);
        let w = Vector::from_slice(&[0.4, -0.9]);
        let got = malliavin_z(&a, &da, &w).unwrap();
        let mut ad = Matrix::<Dual>::lift(&a);
        for i in 0..2 {
            for j in 0..2 {
                ad.m[i][j].du = da.m[i][j];
            }
        }
        let dual = eval_z(&ad, &w, Order::Value).unwrap().value.du;
        assert_relative_eq!(got, dual, max_relative = 1e-12);
    }

    #[test]
    fn identity_order0_fit_is_exact() {
        let f = CoefficientField::<f64>::constant_scalar(1, 1.0);
        let grid = FitGrid::geometric(vec![0.0], 0.01, 1.0, 5, 13, 6.0);
        let fit = envelope_check_z(&f, &Vector::from_slice(&[0.0]), 0, &grid, 1.0).unwrap();
        assert_relative_eq!(fit.envelope.c, (4.0 * PI).powf(-0.5), max_relative = 1e-12);
        assert!((fit.envelope.big_c - 0.25).abs() / 0.25 < 0.01);
        assert!(fit.pass());
    }
}
