//! Finite-difference reference solutions of `∂_t u = div(a ∇u)`.
//!
//! Conservative flux form on a uniform node grid with homogeneous Dirichlet
//! ends, harmonic face means of the coefficient and implicit Euler in time.
//! Steps are split at the coefficient's breakpoints, so every step sees a
//! coefficient that is constant in time. The point-source oracle starts from
//! a narrow normalised Gaussian and extrapolates in the time step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_fields::CoefficientField;
use crate::error::{Error, Result};
use crate::linalg::Vector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdmConfig {
    pub h: f64,
    pub tau: f64,
    pub half_width: f64,
    /// Width of the initial Gaussian; `2h` when absent.
    pub sigma0: Option<f64>,
    /// Extrapolate in `τ` from a second run at `τ/2`.
    pub richardson: bool,
}

impl FdmConfig {
    /// Box half-width `8√(λT)` for the given field and horizon.
    pub fn for_field(field: &CoefficientField<f64>, horizon: f64, h: f64, tau: f64) -> Self {
        let half_width = 8.0 * (field.lambda() * horizon).sqrt();
        Self { h, tau, half_width, sigma0: None, richardson: true }
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0.unwrap_or(2.0 * self.h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.tau > 0.0 && self.half_width > 2.0 * self.h && self.sigma0() >= self.h) {
            return Err(Error::config("fdm", format!("invalid finite-difference parameters {self:?}")));
        }
        Ok(())
    }

    fn nodes(&self) -> usize {
        (2.0 * self.half_width / self.h).round() as usize + 1
    }
}

/// Nodal values on `[-L, L]^d`, row-major with `x_0` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub dim: usize,
    pub n: usize,
    pub h: f64,
    pub half_width: f64,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(dim: usize, cfg: &FdmConfig) -> Self {
        let n = cfg.nodes();
        let h = 2.0 * cfg.half_width / (n - 1) as f64;
        Self { dim, n, h, half_width: cfg.half_width, values: vec![0.0; n.pow(dim as u32)] }
    }

    pub fn from_fn(dim: usize, cfg: &FdmConfig, f: impl Fn(&Vector<f64>) -> f64) -> Self {
        let mut g = Self::zeros(dim, cfg);
        for idx in 0..g.values.len() {
            let x = g.position(idx);
            g.values[idx] = f(&x);
        }
        g
    }

    /// Normalised Gaussian of standard deviation `sigma` centred at `y`.
    pub fn gaussian(dim: usize, cfg: &FdmConfig, y: &Vector<f64>, sigma: f64) -> Self {
        let mut g = Self::from_fn(dim, cfg, |x| (-(*x - *y).norm2() / (2.0 * sigma * sigma)).exp());
        let m = g.mass();
        for v in &mut g.values {
            *v /= m;
        }
        g
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h
    }

    pub fn position(&self, idx: usize) -> Vector<f64> {
        let mut x = Vector::zeros(self.dim);
        let mut rem = idx;
        for k in 0..self.dim {
            x[k] = self.coord(rem % self.n);
            rem /= self.n;
        }
        x
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.h.powi(self.dim as i32)
    }

    /// Multilinear interpolation; zero outside the box.
    pub fn sample(&self, x: &Vector<f64>) -> f64 {
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for k in 0..self.dim {
            let p = (x[k] + self.half_width) / self.h;
            if !(p >= 0.0 && p <= (self.n - 1) as f64) {
                return 0.0;
            }
            let i = (p.floor() as usize).min(self.n - 2);
            base[k] = i;
            frac[k] = p - i as f64;
        }
        match self.dim {
            1 => self.values[base[0]] * (1.0 - frac[0]) + self.values[base[0] + 1] * frac[0],
            _ => {
                let at = |i: usize, j: usize| self.values[i + j * self.n];
                let (i, j, fx, fy) = (base[0], base[1], frac[0], frac[1]);
                (1.0 - fy) * ((1.0 - fx) * at(i, j) + fx * at(i + 1, j)) + fy * ((1.0 - fx) * at(i, j + 1) + fx * at(i + 1, j + 1))
            }
        }
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Step end times from `s` to `t` with nominal size `tau`, split at `stops`.
fn schedule(s: f64, t: f64, tau: f64, stops: &[f64]) -> Vec<f64> {
    let mut marks: Vec<f64> = stops.iter().copied().filter(|&b| b > s && b < t).collect();
    marks.push(t);
    marks.sort_by(f64::total_cmp);
    marks.dedup();
    let mut out = Vec::new();
    let mut cur = s;
    for &m in &marks {
        let n = ((m - cur) / tau - 1e-9).ceil().max(1.0) as usize;
        for k in 1..=n {
            out.push(cur + (m - cur) * k as f64 / n as f64);
        }
        cur = m;
    }
    out
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = upper[i] / m;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Diagonal coefficient entries `a_kk` at every node.
fn nodal_diagonal(field: &CoefficientField<f64>, g: &GridFunction, t: f64) -> Result<Vec<[f64; 2]>> {
    (0..g.values.len())
        .map(|idx| {
            let a = field.eval(&g.position(idx), t);
            if g.dim == 2 && (a.m[0][1].abs() > 0.0 || a.m[1][0].abs() > 0.0) {
                return Err(Error::Unsupported("finite differences with off-diagonal coefficients".into()));
            }
            Ok([a.m[0][0], if g.dim == 2 { a.m[1][1] } else { 0.0 }])
        })
        .collect()
}

fn step_1d(u: &mut GridFunction, a: &[[f64; 2]], dt: f64) {
    let n = u.n;
    let r = dt / (u.h * u.h);
    let (mut lo, mut di, mut up) = (vec![0.0; n - 2], vec![0.0; n - 2], vec![0.0; n - 2]);
    for i in 1..n - 1 {
        let west = harmonic(a[i - 1][0], a[i][0]);
        let east = harmonic(a[i][0], a[i + 1][0]);
        lo[i - 1] = -r * west;
        up[i - 1] = -r * east;
        di[i - 1] = 1.0 + r * (west + east);
    }
    let mut rhs: Vec<f64> = u.values[1..n - 1].to_vec();
    let mut scratch = vec![0.0; n - 2];
    thomas(&lo, &di, &up, &mut rhs, &mut scratch);
    u.values[1..n - 1].copy_from_slice(&rhs);
    u.values[0] = 0.0;
    u.values[n - 1] = 0.0;
}

/// One implicit step in 2D by Jacobi-preconditioned conjugate gradients.
fn step_2d(u: &mut GridFunction, a: &[[f64; 2]], dt: f64) -> Result<()> {
    let n = u.n;
    let r = dt / (u.h * u.h);
    let idx = |i: usize, j: usize| i + j * n;
    let interior = |i: usize, j: usize| i > 0 && j > 0 && i < n - 1 && j < n - 1;
    // face coefficients: east of (i,j) and north of (i,j)
    let mut east = vec![0.0; n * n];
    let mut north = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            if i + 1 < n {
                east[idx(i, j)] = r * harmonic(a[idx(i, j)][0], a[idx(i + 1, j)][0]);
            }
            if j + 1 < n {
                north[idx(i, j)] = r * harmonic(a[idx(i, j)][1], a[idx(i, j + 1)][1]);
            }
        }
    }
    let apply = |v: &[f64], out: &mut [f64]| {
        for j in 0..n {
            for i in 0..n {
                let k = idx(i, j);
                if !interior(i, j) {
                    out[k] = v[k];
                    continue;
                }
                let (e, w, nn, s) = (east[k], east[idx(i - 1, j)], north[k], north[idx(i, j - 1)]);
                let nb = |ii: usize, jj: usize| if interior(ii, jj) { v[idx(ii, jj)] } else { 0.0 };
                out[k] = (1.0 + e + w + nn + s) * v[k] - e * nb(i + 1, j) - w * nb(i - 1, j) - nn * nb(i, j + 1) - s * nb(i, j - 1);
            }
        }
    };
    let diag: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k % n, k / n);
            if interior(i, j) {
                1.0 + east[k] + east[k - 1] + north[k] + north[k - n]
            } else {
                1.0
            }
        })
        .collect();
    let b: Vec<f64> = (0..n * n).map(|k| if interior(k % n, k / n) { u.values[k] } else { 0.0 }).collect();
    let mut x = b.clone();
    let mut ax = vec![0.0; n * n];
    apply(&x, &mut ax);
    let mut res: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = res.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut ap = vec![0.0; n * n];
    for _ in 0..10 * n {
        let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= 1e-12 * bnorm {
            u.values = x;
            return Ok(());
        }
        apply(&p, &mut ap);
        let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..n * n {
            x[k] += alpha * p[k];
            res[k] -= alpha * ap[k];
            z[k] = res[k] / diag[k];
        }
        let rz_new: f64 = res.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n * n {
            p[k] = z[k] + beta * p[k];
        }
    }
    let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(Error::NonConvergence { what: "conjugate gradients".into(), residual: rn / bnorm })
}

/// Evolves `init` from `s` to each of `checkpoints` (ascending, all > s) with step `tau`.
fn evolve(field: &CoefficientField<f64>, init: &GridFunction, s: f64, checkpoints: &[f64], tau: f64) -> Result<Vec<GridFunction>> {
    let t_end = *checkpoints.last().ok_or_else(|| Error::domain("no checkpoints"))?;
    let mut stops = field.breakpoints().to_vec();
    stops.extend_from_slice(checkpoints);
    let steps = schedule(s, t_end, tau, &stops);
    let mut u = init.clone();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let mut cur = s;
    let x_indep = field.is_x_independent();
    let mut cached: Option<(f64, Vec<[f64; 2]>)> = None;
    for &e in &steps {
        let mid = 0.5 * (cur + e);
        // x-independent piecewise fields are re-evaluated only when the value changes
        let a = match &cached {
            Some((m, a)) if x_indep && field.eval(&Vector::zeros(u.dim), *m) == field.eval(&Vector::zeros(u.dim), mid) => a.clone(),
            _ => nodal_diagonal(field, &u, mid)?,
        };
        match u.dim {
            1 => step_1d(&mut u, &a, e - cur),
            2 => step_2d(&mut u, &a, e - cur)?,
            d => return Err(Error::Unsupported(format!("finite differences in dimension {d}"))),
        }
        cached = Some((mid, a));
        cur = e;
        while next < checkpoints.len() && (checkpoints[next] - e).abs() <= 1e-12 * t_end.max(1.0) {
            out.push(u.clone());
            next += 1;
        }
    }
    Ok(out)
}

/// Solution of the equation from `init` at time `s` to time `t`.
pub fn solve(field: &CoefficientField<f64>, init: &GridFunction, s: f64, t: f64, cfg: &FdmConfig) -> Result<GridFunction> {
    cfg.validate()?;
    if !(s < t) {
        return Err(Error::domain(format!("solve needs s < t (got s={s}, t={t})")));
    }
    let coarse = evolve(field, init, s, &[t], cfg.tau)?.pop().unwrap();
    if !cfg.richardson {
        return Ok(coarse);
    }
    let fine = evolve(field, init, s, &[t], 0.5 * cfg.tau)?.pop().unwrap();
    Ok(extrapolate(&coarse, &fine))
}

fn extrapolate(coarse: &GridFunction, fine: &GridFunction) -> GridFunction {
    let mut out = fine.clone();
    for (o, c) in out.values.iter_mut().zip(&coarse.values) {
        *o = 2.0 * *o - c;
    }
    out
}

/// Oracle value with its extrapolation error estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub error_estimate: f64,
}

/// Γ(x, t; y, s) for every `x` in `xs` and every `t` in `times` from a single
/// point-source run; result indexed `[time][x]`.
pub fn gamma_profile(field: &CoefficientField<f64>, xs: &[Vector<f64>], times: &[f64], y: &Vector<f64>, s: f64, cfg: &FdmConfig) -> Result<Vec<Vec<OracleValue>>> {
    cfg.validate()?;
    let mut ts = times.to_vec();
    ts.sort_by(f64::total_cmp);
    if ts.first().is_none_or(|&t0| t0 - s < 10.0 * cfg.tau) {
        return Err(Error::Resolution(format!("need t - s ≥ 10τ = {} for the point-source oracle", 10.0 * cfg.tau)));
    }
    let init = GridFunction::gaussian(field.dim(), cfg, y, cfg.sigma0());
    let coarse = evolve(field, &init, s, &ts, cfg.tau)?;
    let fine = if cfg.richardson { Some(evolve(field, &init, s, &ts, 0.5 * cfg.tau)?) } else { None };
    Ok(times
        .iter()
        .map(|t| {
            let k = ts.iter().position(|v| v == t).unwrap();
            xs.iter()
                .map(|x| {
                    let c = coarse[k].sample(x);
                    match &fine {
                        Some(f) => {
                            let fv = f[k].sample(x);
                            OracleValue { value: 2.0 * fv - c, error_estimate: (fv - c).abs() }
                        }
                        None => OracleValue { value: c, error_estimate: f64::NAN },
                    }
                })
                .collect()
        })
        .collect())
}

/// Γ(x, t; y, s) by the point-source finite-difference run.
pub fn gamma_oracle(field: &CoefficientField<f64>, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64, cfg: &FdmConfig) -> Result<OracleValue> {
    Ok(gamma_profile(field, std::slice::from_ref(x), &[t], y, s, cfg)?[0][0])
}

/// Independent point sources `(y, s)` in parallel; result indexed `[source][time][x]`.
pub fn gamma_batch(
    field: &CoefficientField<f64>,
    xs: &[Vector<f64>],
    times: &[f64],
    sources: &[(Vector<f64>, f64)],
    cfg: &FdmConfig,
) -> Result<Vec<Vec<Vec<OracleValue>>>> {
    sources.par_iter().map(|(y, s)| gamma_profile(field, xs, times, y, *s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff_fields::{catalog, TimeProfile};
    use crate::linalg::Matrix;

    fn v1(x: f64) -> Vector<f64> {
        Vector::from_slice(&[x])
    }

    #[test]
    fn schedule_hits_breakpoints() {
        let st = schedule(0.0, 1.0, 0.3, &[0.5]);
        assert!(st.contains(&0.5));
        assert_eq!(*st.last().unwrap(), 1.0);
        assert!(st.windows(2).all(|w| w[1] - w[0] <= 0.3 + 1e-12));
    }

    #[test]
    fn heat_equation_widens_a_gaussian() {
        let f = CoefficientField::<f64>::constant_scalar(1, 1.0);
        let cfg = FdmConfig { h: 0.01, tau: 2e-3, half_width: 8.0, sigma0: None, richardson: true };
        let v0: f64 = 0.1;
        let init = GridFunction::gaussian(1, &cfg, &v1(0.0), v0.sqrt());
        let u = solve(&f, &init, 0.0, 0.5, &cfg).unwrap();
        let var = v0 + 2.0 * 0.5;
        let want = |x: f64| (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let peak = want(0.0);
        let err = (0..u.n).map(|i| (u.values[i] - want(u.coord(i))).abs()).fold(0.0, f64::max);
        assert!(err / peak < 1e-3, "{}", err / peak);
        assert!((u.mass() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn piecewise_x_independent_matches_frozen_gaussian() {
        let prof = TimeProfile::new(vec![0.0, 0.5, 1.0], vec![2.0, 1.0]).unwrap();
        let f = CoefficientField::piecewise_scalar(Matrix::identity(1), prof, 2.0).unwrap();
        let cfg = FdmConfig { h: 0.01, tau: 2e-3, half_width: 8.0, sigma0: None, richardson: true };
        let got = gamma_profile(&f, &[v1(0.0), v1(0.5), v1(1.0)], &[1.0], &v1(0.0), 0.0, &cfg).unwrap();
        let var = 2.0 * 1.5 + cfg.sigma0().powi(2);
        for (k, x) in [0.0f64, 0.5, 1.0].iter().enumerate() {
            let want = (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            assert!((got[0][k].value - want).abs() / want < 1e-3);
        }
    }

    #[test]
    fn anisotropic_2d_is_a_product() {
        let a = Matrix::from_rows(&[vec![1.5, 0.0], vec![0.0, 0.75]]);
        let prof = TimeProfile::new(vec![0.0, 1.0], vec![1.0]).unwrap();
        let f = CoefficientField::piecewise_scalar(a, prof, 2.0).unwrap();
        let cfg = FdmConfig { h: 0.1, tau: 1e-3, half_width: 6.0, sigma0: Some(0.3), richardson: false };
        let init = GridFunction::gaussian(2, &cfg, &Vector::from_slice(&[0.0, 0.0]), 0.3);
        let u = solve(&f, &init, 0.0, 0.3, &cfg).unwrap();
        let f1 = |c: f64| {
            let g = CoefficientField::<f64>::constant_scalar(1, c);
            let init = GridFunction::gaussian(1, &cfg, &v1(0.0), 0.3);
            solve(&g, &init, 0.0, 0.3, &cfg).unwrap()
        };
        let (ux, uy) = (f1(1.5), f1(0.75));
        for (i, j) in [(60, 60), (65, 58), (70, 62)] {
            let want = ux.values[i] * uy.values[j];
            let got = u.values[i + j * u.n];
            assert!((got - want).abs() < 2e-3 * want, "{got} {want}");
        }
        assert!((u.mass() - 1.0).abs() < 1e-7, "{}", u.mass() - 1.0);
    }

    #[test]
    fn tanh_field_conserves_mass_and_positivity() {
        let f = catalog::modulated_tanh(1, catalog::alternating_profile(4, 1.0, 1.0, 1.5), 0.25, 1.75).unwrap();
        let cfg = FdmConfig::for_field(&f, 1.0, 0.02, 5e-3);
        let init = GridFunction::gaussian(1, &cfg, &v1(0.3), cfg.sigma0());
        let u = solve(&f, &init, 0.0, 1.0, &FdmConfig { richardson: false, ..cfg }).unwrap();
        // the box holds ±8√(λT), so only the far Gaussian tail leaks
        assert!((u.mass() - 1.0).abs() < 1e-6, "{}", u.mass() - 1.0);
        assert!(u.values.iter().all(|&v| v >= 0.0));
    }
}
