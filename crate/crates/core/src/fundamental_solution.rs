//! Assembly of `Γ = Z + Z ∗ Φ` and `∇Γ`, with the residual and envelope
//! batteries that exercise it.
//!
//! Γ is evaluated lazily per point. The only stored objects are the
//! per-source [`PhiTable`]s, built on first use and cached.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_fields::CoefficientField;
use crate::error::{Error, Result};
use crate::kernel_iteration::{ConvolutionRule, GridParams, PhiTable, SeriesDiagnostics};
use crate::linalg::Vector;
use crate::parametrix::{fit_amplitude, EnvelopeFit, FitGrid, GaussianEnvelope, GaussianFactor, Order, EPS_FIT};
use crate::quadrature::{trapezoid, Singular};
use crate::scalar::Real;


type SourceKey = ([u64; 3], u64);

fn key(y: &Vector<f64>, s: f64) -> SourceKey {
    let mut k = [0u64; 3];
    for (i, v) in y.as_slice().iter().enumerate() {
        k[i] = v.to_bits();
    }
    (k, s.to_bits())
}

/// `Γ(x,t,y,s)` and `∇_x Γ`.
#[derive(Clone, Copy, Debug)]
pub struct GammaValue<S> {
    pub value: S,
    pub gradient: Vector<S>,
}

/// The fundamental solution of `∂_t u = div(a ∇u)` on `[0, horizon]`.
pub struct FundamentalSolution<S> {
    field: CoefficientField<S>,
    horizon: f64,
    params: GridParams,
    cache: Mutex<HashMap<SourceKey, Arc<PhiTable<S>>>>,
}

impl<S: Real> FundamentalSolution<S> {
    pub fn new(field: CoefficientField<S>, horizon: f64, params: GridParams) -> Result<Self> {
        params.validate()?;
        if !(horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive (got {horizon})")));
        }
        Ok(Self { field, horizon, params, cache: Mutex::new(HashMap::new()) })
    }

    pub fn field(&self) -> &CoefficientField<S> {
        &self.field
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn params(&self) -> &GridParams {
        &self.params
    }

    /// Cached `Φ(·,·; y, s)` table; built on first request.
    pub fn phi_table(&self, y: &Vector<f64>, s: f64) -> Result<Arc<PhiTable<S>>> {
        let k = key(y, s);
        if let Some(t) = self.cache.lock().unwrap().get(&k) {
            return Ok(t.clone());
        }
        let table = Arc::new(PhiTable::build(&self.field, y, s, self.horizon, &self.params)?);
        self.cache.lock().unwrap().insert(k, table.clone());
        Ok(table)
    }

    /// Builds the tables of all `sources` up front.
    pub fn prefetch(&self, sources: &[(Vector<f64>, f64)]) -> Result<()> {
        for (y, s) in sources {
            self.phi_table(y, *s)?;
        }
        Ok(())
    }

    pub fn cached_tables(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Series diagnostics of every cached table.
    pub fn diagnostics(&self) -> Vec<SeriesDiagnostics> {
        self.cache.lock().unwrap().values().map(|t| t.diagnostics.clone()).collect()
    }

    fn check(&self, t: f64, s: f64) -> Result<()> {
        if !(0.0 <= s && s < t && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::domain(format!("need 0 ≤ s < t ≤ {} (got s={s}, t={t})", self.horizon)));
        }
        Ok(())
    }

    /// `Γ` and optionally `∇Γ` at one point.
    pub fn eval(&self, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64, with_gradient: bool) -> Result<GammaValue<S>> {
        self.check(t, s)?;
        let f = &self.field;
        let order = if with_gradient { Order::Gradient } else { Order::Value };
        let sl = f.slice(s, t)?;
        let z = GaussianFactor::new(&f.frozen_at(&f.point(y), &sl))?.eval(&(*x - *y), order);
        let mut out = GammaValue { value: z.value, gradient: z.gradient };
        if f.is_x_independent() {
            return Ok(out);
        }
        let table = self.phi_table(y, s)?;
        let rule = ConvolutionRule::new(f.dim(), f.lambda(), s, t, f.breakpoints(), &self.params, Singular::Both);
        let slices = rule
            .time
            .iter()
            .map(|&(r, _)| Ok((table.at_time(f, r)?, f.slice(r, t)?)))
            .collect::<Result<Vec<_>>>()?;
        let d = f.dim();
        let mut val = S::zero();
        let mut grad = vec![S::zero(); d];
        for (k, &(r, wt)) in rule.time.iter().enumerate() {
            let (at, sl) = &slices[k];
            let (center, sd) = rule.bridge(x, t, y, s, r);
            let (mut v, mut g) = (S::zero(), [S::zero(); 3]);
            rule.for_each_space(&center, sd, |eta, w| {
                let pe = f.point(eta);
                let phi = table.eval_at(f, at, eta, &pe) * S::lit(w);
                let zv = GaussianFactor::new(&f.frozen_at(&pe, sl))?.eval(&(*x - *eta), order);
                v = v + zv.value * phi;
                if with_gradient {
                    for i in 0..d {
                        g[i] = g[i] + zv.gradient[i] * phi;
                    }
                }
                Ok(())
            })?;
            val = val + v * S::lit(wt);
            for i in 0..d {
                grad[i] = grad[i] + g[i] * S::lit(wt);
            }
        }
        out.value = out.value + val;
        for i in 0..d {
            out.gradient[i] = out.gradient[i] + grad[i];
        }
        Ok(out)
    }

    pub fn gamma(&self, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64) -> Result<S> {
        Ok(self.eval(x, t, y, s, false)?.value)
    }

    pub fn grad_gamma(&self, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64) -> Result<Vector<S>> {
        Ok(self.eval(x, t, y, s, true)?.gradient)
    }

    /// `|∫ Γ(x,t,z,r) Γ(z,r,y,s) dz - Γ(x,t,y,s)|` with `n` nodes in `z`.
    ///
    /// Every node is a fresh source `(z, r)`, so this builds `n` tables.
    pub fn chapman_kolmogorov_residual(&self, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64, r: f64, n: usize) -> Result<Residual> {
        if !(s < r && r < t) {
            return Err(Error::domain(format!("need s < r < t (got {s}, {r}, {t})")));
        }
        let f = &self.field;
        let rule = ConvolutionRule { time: vec![], space: trapezoid(8.0, n), lambda: f.lambda(), dim: f.dim() };
        let (center, sd) = rule.bridge(x, t, y, s, r);
        let mut nodes = Vec::new();
        rule.for_each_space(&center, sd, |z, w| {
            nodes.push((*z, w));
            Ok(())
        })?;
        let parts = nodes
            .iter()
            .map(|(z, w)| Ok((self.gamma(x, t, z, r)? * self.gamma(z, r, y, s)?).re() * w))
            .collect::<Result<Vec<f64>>>()?;
        let reference = self.gamma(x, t, y, s)?.re();
        Ok(Residual::new(parts.iter().sum(), reference))
    }

    /// `|∫ Γ(x,t,y,s) dx - 1|` by a trapezoid rule of `n` nodes per dimension.
    pub fn mass_residual_x(&self, t: f64, y: &Vector<f64>, s: f64, n: usize) -> Result<Residual> {
        let sd = (2.0 * self.field.lambda() * (t - s)).sqrt();
        let total = self.integrate_around(y, sd, n, |x| Ok(self.gamma(x, t, y, s)?.re()))?;
        Ok(Residual::new(total, 1.0))
    }

    /// `|∫ Γ(x,t,y,s) dy - 1|`; every node is a fresh source.
    pub fn mass_conservation_residual(&self, x: &Vector<f64>, t: f64, s: f64, n: usize) -> Result<Residual> {
        let sd = (2.0 * self.field.lambda() * (t - s)).sqrt();
        let total = self.integrate_around(x, sd, n, |y| Ok(self.gamma(x, t, y, s)?.re()))?;
        Ok(Residual::new(total, 1.0))
    }

    fn integrate_around(&self, c: &Vector<f64>, sd: f64, n: usize, g: impl Fn(&Vector<f64>) -> Result<f64>) -> Result<f64> {
        let rule = ConvolutionRule { time: vec![], space: trapezoid(9.0, n), lambda: self.field.lambda(), dim: self.field.dim() };
        let mut total = 0.0;
        rule.for_each_space(c, sd, |z, w| {
            total += g(z)? * w;
            Ok(())
        })?;
        Ok(total)
    }
}

/// A computed quantity next to the value it should reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub computed: f64,
    pub reference: f64,
    pub absolute: f64,
}

impl Residual {
    pub fn new(computed: f64, reference: f64) -> Self {
        Self { computed, reference, absolute: (computed - reference).abs() }
    }

    pub fn relative(&self) -> f64 {
        self.absolute / self.reference.abs().max(f64::MIN_POSITIVE)
    }
}

/// Envelope fits for Γ (order 0) or `√(t-s)|∇Γ|` (order 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AronsonFit {
    pub order: usize,
    pub fit: EnvelopeFit,
    /// Smallest Γ seen on the grid (positivity check).
    pub min_value: f64,
    pub points: usize,
}

impl FundamentalSolution<f64> {
    /// Envelope samples `(|w|², τ, |v|)` for every source and grid point.
    pub fn envelope_samples(&self, order: usize, ys: &[Vector<f64>], grid: &FitGrid) -> Result<Vec<(f64, f64, f64, f64)>> {
        let f = &self.field;
        let pts = grid.points(f.dim(), f.lambda(), self.horizon);
        let sources: Vec<(Vector<f64>, f64)> = ys.iter().flat_map(|y| grid.starts.iter().map(move |&s| (*y, s))).collect();
        self.prefetch(&sources)?;
        let jobs: Vec<(Vector<f64>, Vector<f64>, f64, f64)> = ys.iter().flat_map(|y| pts.iter().map(move |(w, s, t)| (*y, *w, *s, *t))).collect();
        jobs.par_iter()
            .map(|(y, w, s, t)| {
                let g = self.eval(&(*y + *w), *t, y, *s, order > 0)?;
                let v = if order == 0 { g.value.abs() } else { g.gradient.norm() };
                Ok((w.norm2(), t - s, v, g.value))
            })
            .collect()
    }

    /// Fits `(t-s)^{k/2}|∂^k Γ| ≤ g_{ϱ,ϖ}` at `ϖ = 1/(4λ(1+ε))`, and repeats on
    /// the refined grid for the stability flag.
    pub fn aronson_fit(&self, order: usize, ys: &[Vector<f64>], grid: &FitGrid) -> Result<AronsonFit> {
        if order > 1 {
            return Err(Error::Unsupported(format!("Aronson fit of order {order}")));
        }
        let big_c = GaussianEnvelope::fixed_rate(self.field.lambda(), EPS_FIT);
        let d = self.field.dim();
        let coarse = self.envelope_samples(order, ys, grid)?;
        let fine = self.envelope_samples(order, ys, &grid.refined())?;
        let amp = |v: &[(f64, f64, f64, f64)]| fit_amplitude(d, order, big_c, v.iter().map(|&(w2, tau, a, _)| (w2, tau, a)));
        let min_value = coarse.iter().chain(&fine).map(|x| x.3).fold(f64::INFINITY, f64::min);
        Ok(AronsonFit {
            order,
            fit: EnvelopeFit::from_pair(amp(&coarse), amp(&fine), big_c, 0.05),
            min_value,
            points: fine.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff_fields::{catalog, TimeProfile};
    use crate::linalg::Matrix;
    use crate::parametrix::eval_z;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn v1(x: f64) -> Vector<f64> {
        Vector::from_slice(&[x])
    }

    fn heat(c: f64, w2: f64, tau: f64, d: i32) -> f64 {
        (4.0 * PI * c * tau).powf(-0.5 * d as f64) * (-w2 / (4.0 * c * tau)).exp()
    }

    #[test]
    fn constant_coefficient_is_the_scaled_heat_kernel() {
        let fs = FundamentalSolution::new(CoefficientField::<f64>::constant_scalar(2, 1.4), 1.0, GridParams::default()).unwrap();
        let (x, y) = (Vector::from_slice(&[0.3, -0.5]), Vector::from_slice(&[-0.1, 0.2]));
        let g = fs.eval(&x, 0.9, &y, 0.2, true).unwrap();
        let w = x - y;
        let want = heat(1.4, w.norm2(), 0.7, 2);
        assert_relative_eq!(g.value, want, max_relative = 1e-13);
        for i in 0..2 {
            assert_relative_eq!(g.gradient[i], -w[i] / (2.0 * 1.4 * 0.7) * want, max_relative = 1e-12);
        }
        assert_eq!(fs.grad_gamma(&y, 0.9, &y, 0.2).unwrap().norm(), 0.0);
        assert_eq!(fs.cached_tables(), 0);
    }

    #[test]
    fn piecewise_x_independent_uses_the_integrated_covariance() {
        let prof = TimeProfile::new(vec![0.0, 0.5, 1.0], vec![2.0, 1.0]).unwrap();
        let f = CoefficientField::piecewise_scalar(Matrix::identity(1), prof, 2.0).unwrap();
        let fs = FundamentalSolution::new(f, 1.0, GridParams::default()).unwrap();
        let got = fs.gamma(&v1(0.7), 1.0, &v1(0.0), 0.0).unwrap();
        assert_relative_eq!(got, heat(1.5, 0.49, 1.0, 1), max_relative = 1e-13);
        let m = fs.mass_residual_x(1.0, &v1(0.0), 0.0, 64).unwrap();
        assert!(m.absolute < 1e-10, "{m:?}");
    }

    #[test]
    fn ordering_is_enforced() {
        let fs = FundamentalSolution::new(CoefficientField::<f64>::constant_scalar(1, 1.0), 1.0, GridParams::default()).unwrap();
        assert!(fs.gamma(&v1(0.0), 0.5, &v1(0.0), 0.5).is_err());
        assert!(fs.gamma(&v1(0.0), 1.5, &v1(0.0), 0.5).is_err());
        assert!(fs.chapman_kolmogorov_residual(&v1(0.0), 1.0, &v1(0.0), 0.0, 1.0, 8).is_err());
    }

    #[test]
    fn constant_chapman_kolmogorov_is_exact() {
        let fs = FundamentalSolution::new(CoefficientField::<f64>::constant_scalar(1, 0.8), 1.0, GridParams::default()).unwrap();
        let r = fs.chapman_kolmogorov_residual(&v1(0.4), 1.0, &v1(-0.3), 0.1, 0.45, 40).unwrap();
        assert!(r.relative() < 1e-8, "{r:?}");
    }

    #[test]
    fn tanh_instance_corrects_the_parametrix() {
        let f = catalog::modulated_tanh(1, catalog::alternating_profile(3, 1.0, 1.0, 1.5), 0.25, 1.75).unwrap();
        let fs = FundamentalSolution::new(f.clone(), 1.0, GridParams::default()).unwrap();
        let (x, y) = (v1(1.1), v1(0.3));
        let g = fs.gamma(&x, 1.0, &y, 0.0).unwrap();
        let z = eval_z(&f.integrate_in_time(&y, 0.0, 1.0).unwrap().a, &(x - y), Order::Value).unwrap().value;
        assert!(g > 0.0 && (g - z).abs() > 1e-3 * z);
        let m = fs.mass_residual_x(1.0, &y, 0.0, 64).unwrap();
        assert!(m.absolute < 1e-4, "{m:?}");
        assert_eq!(fs.cached_tables(), 1);
    }
}
