//! The kernel `K = (L - ∂_t) Z`, its iterates `K_m`, and the series `Φ = Σ K_m`.
//!
//! For one source `(y, s)` the iterates are tabulated in similarity
//! coordinates: a spatial node `u` at time `r` sits at
//! `ζ = y + √(λ(r-s))·u`, and the stored value is the weighted
//! `Ψ_m = (r-s)^{(d+1)/2}·K_m(ζ, r; y, s)`, which is bounded and smooth in
//! `(u, ρ)` with `r = s + H ρ²` inside each piece of constancy of the
//! coefficient. Time interpolation never crosses a coefficient breakpoint.
//!
//! Each level is one space-time convolution with the singular time rule of
//! [`crate::quadrature`] and a spatial rule centred on the Brownian-bridge
//! midpoint between the two kernels, whose width shrinks with both
//! `t - r` and `r - s`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff_fields::{CoefficientField, PointEval, TimeSlice};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::parametrix::{GaussianFactor, Order};
use crate::quadrature::{split_time_rule, trapezoid, Rule, Singular};
use crate::scalar::Real;

/// Resolution of the per-source tables and convolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    /// Similarity nodes per dimension on `[-u_max, u_max]`.
    pub n_u: usize,
    pub u_max: f64,
    /// Time-node budget in `ρ = √((r-s)/H)`.
    pub n_rho: usize,
    /// Minimum time nodes in each piece of constancy.
    pub min_nodes_per_piece: usize,
    /// Time quadrature nodes per convolution.
    pub n_theta: usize,
    /// Minimum quadrature nodes in each piece of a split time rule.
    pub min_theta_per_piece: usize,
    /// Spatial quadrature nodes per dimension.
    pub n_q: usize,
    /// Spatial quadrature half-width in bridge standard deviations.
    pub v_max: f64,
    pub tail_tol: f64,
    pub m_max: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            n_u: 51,
            u_max: 9.0,
            n_rho: 12,
            min_nodes_per_piece: 2,
            n_theta: 16,
            min_theta_per_piece: 1,
            n_q: 40,
            v_max: 7.0,
            tail_tol: 1e-8,
            m_max: 20,
        }
    }
}

impl GridParams {
    /// Twice the resolution in every direction.
    pub fn refined(&self) -> Self {
        Self {
            n_u: 2 * self.n_u - 1,
            n_rho: 2 * self.n_rho,
            n_theta: 2 * self.n_theta,
            n_q: 2 * self.n_q,
            min_nodes_per_piece: self.min_nodes_per_piece,
            min_theta_per_piece: 2 * self.min_theta_per_piece,
            ..self.clone()
        }
    }

    /// Spatial similarity spacing.
    pub fn h(&self) -> f64 {
        2.0 * self.u_max / (self.n_u - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_u >= 5
            && self.u_max > 0.0
            && self.n_rho >= 1
            && self.min_nodes_per_piece >= 1
            && self.n_theta >= 1
            && self.min_theta_per_piece >= 1
            && self.n_q >= 2
            && self.v_max > 0.0
            && self.tail_tol > 0.0
            && self.m_max >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::config("grid", format!("invalid grid parameters {self:?}")))
        }
    }
}

/// Nodes of one piece of constancy, in `ρ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimePiece {
    pub lo: f64,
    pub hi: f64,
    pub nodes: Vec<f64>,
    pub bary: Vec<f64>,
    pub offset: usize,
}

/// Piecewise Chebyshev layout of the time nodes of a table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeLayout {
    pub s: f64,
    pub horizon: f64,
    pub pieces: Vec<TimePiece>,
}

impl TimeLayout {
    pub fn new(s: f64, horizon: f64, breaks: &[f64], n_rho: usize, min_nodes: usize) -> Self {
        let h = horizon - s;
        let mut edges = vec![0.0];
        edges.extend(breaks.iter().filter(|&&b| b > s && b < horizon).map(|&b| ((b - s) / h).sqrt()));
        edges.push(1.0);
        let mut pieces = Vec::with_capacity(edges.len() - 1);
        let mut offset = 0;
        for w in edges.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let n = ((n_rho as f64 * (hi - lo)).round() as usize).clamp(min_nodes.max(1), n_rho.max(min_nodes));
            let nodes: Vec<f64> = (0..n)
                .map(|j| {
                    let x = -((2 * j + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos();
                    0.5 * (lo + hi) + 0.5 * (hi - lo) * x
                })
                .collect();
            let bary = (0..n)
                .map(|j| {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    sign * ((2 * j + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).sin()
                })
                .collect();
            pieces.push(TimePiece { lo, hi, nodes, bary, offset });
            offset += n;
        }
        Self { s, horizon, pieces }
    }

    pub fn len(&self) -> usize {
        self.pieces.last().map_or(0, |p| p.offset + p.nodes.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rho(&self, r: f64) -> f64 {
        ((r - self.s) / (self.horizon - self.s)).max(0.0).sqrt()
    }

    pub fn time_of(&self, rho: f64) -> f64 {
        self.s + (self.horizon - self.s) * rho * rho
    }

    /// All node times in storage order.
    pub fn times(&self) -> Vec<f64> {
        self.pieces.iter().flat_map(|p| p.nodes.iter().map(|&r| self.time_of(r))).collect()
    }

    /// Barycentric weights for evaluating at time `r`, as `(offset, coefficients)`.
    pub fn weights(&self, r: f64) -> (usize, Vec<f64>) {
        let rho = self.rho(r).min(1.0);
        let k = self.pieces.partition_point(|p| p.hi <= rho).min(self.pieces.len() - 1);
        let p = &self.pieces[k];
        let mut coef = vec![0.0; p.nodes.len()];
        for (j, &x) in p.nodes.iter().enumerate() {
            if rho == x {
                coef[j] = 1.0;
                return (p.offset, coef);
            }
        }
        let mut den = 0.0;
        for (j, &x) in p.nodes.iter().enumerate() {
            coef[j] = p.bary[j] / (rho - x);
            den += coef[j];
        }
        for c in &mut coef {
            *c /= den;
        }
        (p.offset, coef)
    }
}

/// Structured grid of one source: similarity lattice × piecewise time nodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub dim: usize,
    pub y: Vec<f64>,
    pub lambda: f64,
    pub n_u: usize,
    pub u_max: f64,
    pub time: TimeLayout,
}

impl SpaceTimeGrid {
    pub fn new(dim: usize, y: &Vector<f64>, s: f64, horizon: f64, lambda: f64, breaks: &[f64], p: &GridParams) -> Self {
        Self {
            dim,
            y: y.as_slice().to_vec(),
            lambda,
            n_u: p.n_u,
            u_max: p.u_max,
            time: TimeLayout::new(s, horizon, breaks, p.n_rho, p.min_nodes_per_piece),
        }
    }

    pub fn n_space(&self) -> usize {
        self.n_u.pow(self.dim as u32)
    }

    pub fn h(&self) -> f64 {
        2.0 * self.u_max / (self.n_u - 1) as f64
    }

    fn y_vec(&self) -> Vector<f64> {
        Vector::from_slice(&self.y)
    }

    /// Similarity offsets of spatial node `j`.
    pub fn u_of(&self, j: usize) -> Vector<f64> {
        let mut u = Vector::zeros(self.dim);
        let mut rem = j;
        for k in 0..self.dim {
            u[k] = -self.u_max + (rem % self.n_u) as f64 * self.h();
            rem /= self.n_u;
        }
        u
    }

    pub fn position(&self, j: usize, r: f64) -> Vector<f64> {
        self.y_vec() + self.u_of(j).scale((self.lambda * (r - self.time.s)).sqrt())
    }

    /// Weight `(r-s)^{(d+1)/2}` relating stored and kernel values.
    pub fn weight(&self, r: f64) -> f64 {
        (r - self.time.s).powf(0.5 * (self.dim + 1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableKind {
    K,
    Km,
    Phi,
    Gamma,
    GradGamma,
}

/// Weighted kernel values `Ψ` on a [`SpaceTimeGrid`], stored `[time][space]`.
#[derive(Clone, Debug)]
pub struct KernelTable<S> {
    pub kind: TableKind,
    pub grid: SpaceTimeGrid,
    pub values: Vec<S>,
    /// Natural-spline second differences per time row (d = 1 only; empty
    /// means four-point Lagrange interpolation).
    pub curv: Vec<S>,
}

impl<S: Real> KernelTable<S> {
    pub fn zeros(kind: TableKind, grid: SpaceTimeGrid) -> Self {
        let n = grid.n_space() * grid.time.len();
        Self { kind, grid, values: vec![S::zero(); n], curv: Vec::new() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.size()))
    }

    /// Switches a one-dimensional table to C² spline interpolation in space,
    /// so that quantities assembled from it are smooth in the target point.
    pub fn fit_splines(&mut self) {
        let g = &self.grid;
        if g.dim != 1 {
            return;
        }
        let n = g.n_u;
        let h2 = S::lit(g.h() * g.h());
        let six = S::lit(6.0);
        let four = S::lit(4.0);
        self.curv = vec![S::zero(); self.values.len()];
        let mut c = vec![S::zero(); n];
        let mut dd = vec![S::zero(); n];
        for row in 0..g.time.len() {
            let y = &self.values[row * n..(row + 1) * n];
            // M_{i-1} + 4 M_i + M_{i+1} = 6 Δ²y_i / h², natural ends
            for i in 1..n - 1 {
                let rhs = six * (y[i + 1] - y[i] - y[i] + y[i - 1]) / h2;
                let m = if i == 1 { four } else { four - c[i - 1] };
                c[i] = m.recip();
                dd[i] = if i == 1 { rhs / m } else { (rhs - dd[i - 1]) / m };
            }
            let m = &mut self.curv[row * n..(row + 1) * n];
            for i in (1..n - 1).rev() {
                m[i] = if i == n - 2 { dd[i] } else { dd[i] - c[i] * m[i + 1] };
            }
        }
    }

    /// Stored (weighted) value interpolated at `(x, r)`, given time weights
    /// from [`TimeLayout::weights`].
    pub fn interp_weighted(&self, tw: &(usize, Vec<f64>), r: f64, x: &Vector<f64>) -> S {
        let g = &self.grid;
        let scale = (g.lambda * (r - g.time.s)).sqrt();
        let h = g.h();
        let d = g.dim;
        let mut base = [0usize; 3];
        let mut lw = [[0.0f64; 4]; 3];
        for k in 0..d {
            let u = (x[k] - g.y[k]) / scale;
            if !(u.abs() <= g.u_max) {
                return S::zero();
            }
            let pos = (u + g.u_max) / h;
            let i0 = (pos.floor() as isize - 1).clamp(0, g.n_u as isize - 4) as usize;
            base[k] = i0;
            let t = pos - i0 as f64;
            lw[k] = [
                -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0,
                t * (t - 2.0) * (t - 3.0) / 2.0,
                -t * (t - 1.0) * (t - 3.0) / 2.0,
                t * (t - 1.0) * (t - 2.0) / 6.0,
            ];
        }
        let ns = g.n_space();
        let (off, coef) = tw;
        let mut acc = S::zero();
        if !self.curv.is_empty() {
            let pos = ((x[0] - g.y[0]) / scale + g.u_max) / h;
            let i = (pos.floor() as usize).min(g.n_u - 2);
            let t = pos - i as f64;
            let (a, b) = (1.0 - t, t);
            let (ca, cb) = (S::lit(h * h / 6.0 * (a * a * a - a)), S::lit(h * h / 6.0 * (b * b * b - b)));
            let (la, lb) = (S::lit(a), S::lit(b));
            for (jt, c) in coef.iter().enumerate() {
                let base = (off + jt) * ns + i;
                let v = self.values[base] * la + self.values[base + 1] * lb + self.curv[base] * ca + self.curv[base + 1] * cb;
                acc = acc + v * S::lit(*c);
            }
            return acc;
        }
        match d {
            1 => {
                for (jt, c) in coef.iter().enumerate() {
                    let row = &self.values[(off + jt) * ns..];
                    let mut v = S::zero();
                    for a in 0..4 {
                        v = v + row[base[0] + a] * S::lit(lw[0][a]);
                    }
                    acc = acc + v * S::lit(*c);
                }
            }
            _ => {
                for (jt, c) in coef.iter().enumerate() {
                    let row = &self.values[(off + jt) * ns..];
                    let mut v = S::zero();
                    for b in 0..4 {
                        for a in 0..4 {
                            let idx = base[0] + a + (base[1] + b) * g.n_u;
                            v = v + row[idx] * S::lit(lw[0][a] * lw[1][b]);
                        }
                    }
                    acc = acc + v * S::lit(*c);
                }
            }
        }
        acc
    }

    /// Kernel value (unweighted) at `(x, r)`.
    pub fn interp(&self, x: &Vector<f64>, r: f64) -> S {
        let tw = self.grid.time.weights(r);
        self.interp_weighted(&tw, r, x) / S::lit(self.grid.weight(r))
    }
}

const MAGIC: &[u8; 4] = b"HKTB";

impl KernelTable<f64> {
    /// Flat little-endian layout: magic, header, then row-major `f64` payload.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let g = &self.grid;
        w.write_all(MAGIC)?;
        for v in [1u32, g.dim as u32, g.n_u as u32, g.time.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut header = vec![g.u_max, g.lambda, g.time.s, g.time.horizon];
        header.extend(&g.y);
        header.extend(g.time.times());
        for v in header.iter().chain(&self.values) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the payload written by [`Self::write_binary`] into a table with
    /// the given grid (taken from the JSON sidecar).
    pub fn read_binary(kind: TableKind, grid: SpaceTimeGrid, mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 20 || &buf[..4] != MAGIC {
            return Err(Error::Serde("not a kernel table".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (dim, n_u, nt) = (word(1), word(2), word(3));
        if dim != grid.dim || n_u != grid.n_u || nt != grid.time.len() {
            return Err(Error::Serde("table header does not match grid".into()));
        }
        let floats: Vec<f64> = buf[20..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let skip = 4 + dim + nt;
        let values = floats.get(skip..).ok_or_else(|| Error::Serde("truncated table".into()))?.to_vec();
        if values.len() != grid.n_space() * nt {
            return Err(Error::Serde("payload size mismatch".into()));
        }
        Ok(Self { kind, grid, values, curv: Vec::new() })
    }

    pub fn sidecar(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "grid": self.grid,
            "layout": "row-major [time][space], little-endian f64",
            "fits": extra,
        })
    }
}

/// Precomputed data for evaluating `K(x, t, ·, r)` along one time pair.
pub struct KernelEval<'a, S> {
    pub field: &'a CoefficientField<S>,
}

impl<'a, S: Real> KernelEval<'a, S> {
    pub fn new(field: &'a CoefficientField<S>) -> Self {
        Self { field }
    }

    /// `K(x,t,y,s)` from spatial factors at `x` and `y` and the slice `(s,t)`.
    #[inline]
    pub fn k(&self, px: &PointEval, py: &PointEval, sl: &TimeSlice<S>, w: &Vector<f64>) -> Result<S> {
        let gf = GaussianFactor::new(&self.field.frozen_at(py, sl))?;
        Ok(self.k_frozen(&gf, px, py, sl, w))
    }

    /// As [`Self::k`] with `a(x,t)` and `γ(x,t)` supplied.
    #[inline]
    pub fn k_at(&self, ax: &Matrix<S>, gx: &Vector<S>, py: &PointEval, sl: &TimeSlice<S>, w: &Vector<f64>) -> Result<S> {
        let f = self.field;
        let pv = GaussianFactor::new(&f.frozen_at(py, sl))?.eval(w, Order::Hessian);
        let diff = *ax - f.value_at(py, sl);
        let mut k = diff.trace_product(&pv.hessian);
        for i in 0..f.dim() {
            k = k + gx[i] * pv.gradient[i];
        }
        Ok(k)
    }

    /// As [`Self::k`] with the Gaussian factor frozen at `y` supplied.
    #[inline]
    pub fn k_frozen(&self, gf: &GaussianFactor<S>, px: &PointEval, py: &PointEval, sl: &TimeSlice<S>, w: &Vector<f64>) -> S {
        let f = self.field;
        let pv = gf.eval(w, Order::Hessian);
        let diff = f.value_at(px, sl) - f.value_at(py, sl);
        let gam = f.gamma_at(px, sl);
        let mut k = diff.trace_product(&pv.hessian);
        for i in 0..f.dim() {
            k = k + gam[i] * pv.gradient[i];
        }
        k
    }
}

/// `K(x,t,y,s) = Σ (a_ij(x,t) - a_ij(y,t)) ∂_ij Z + Σ γ_i(x,t) ∂_i Z`, with
/// `Z` frozen at `y` over `(s, t)`.
pub fn eval_k<S: Real>(field: &CoefficientField<S>, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64) -> Result<S> {
    if !(s < t) {
        return Err(Error::domain(format!("kernel needs s < t (got s={s}, t={t})")));
    }
    let sl = field.slice(s, t)?;
    KernelEval::new(field).k(&field.point(x), &field.point(y), &sl, &(*x - *y))
}

/// Space-time quadrature for `∫_s^t ∫ outer(x,t,η,r)·inner(η,r,y,s) dη dr`.
#[derive(Clone, Debug)]
pub struct ConvolutionRule {
    pub time: Rule,
    /// Standardised spatial nodes (tensor product of these per dimension).
    pub space: Rule,
    pub lambda: f64,
    pub dim: usize,
}

impl ConvolutionRule {
    pub fn new(dim: usize, lambda: f64, s: f64, t: f64, breaks: &[f64], p: &GridParams, sing: Singular) -> Self {
        Self {
            time: split_time_rule(s, t, breaks, p.n_theta, p.min_theta_per_piece, sing),
            space: trapezoid(p.v_max, p.n_q),
            lambda,
            dim,
        }
    }

    /// Bridge centre and standard deviation at intermediate time `r`.
    #[inline]
    pub fn bridge(&self, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64, r: f64) -> (Vector<f64>, f64) {
        let f = (r - s) / (t - s);
        let center = *y + (*x - *y).scale(f);
        let sd = (2.0 * self.lambda * (t - r) * f).sqrt();
        (center, sd)
    }

    /// Visits every spatial node for time index `k`: `(η, weight)`.
    #[inline]
    pub fn for_each_space(&self, center: &Vector<f64>, sd: f64, mut f: impl FnMut(&Vector<f64>, f64) -> Result<()>) -> Result<()> {
        match self.dim {
            1 => {
                for (v, w) in &self.space {
                    let mut eta = *center;
                    eta[0] += sd * v;
                    f(&eta, w * sd)?;
                }
            }
            2 => {
                for (v1, w1) in &self.space {
                    for (v2, w2) in &self.space {
                        let mut eta = *center;
                        eta[0] += sd * v1;
                        eta[1] += sd * v2;
                        f(&eta, w1 * w2 * sd * sd)?;
                    }
                }
            }
            d => return Err(Error::Unsupported(format!("convolution in dimension {d}"))),
        }
        Ok(())
    }
}

/// Generic space-time convolution; `integrand(k, r, η)` returns the product
/// `outer(x,t,η,r)·inner(η,r,y,s)` at time node `k` of `rule.time`.
pub fn convolve<S: Real>(
    rule: &ConvolutionRule,
    x: &Vector<f64>,
    t: f64,
    y: &Vector<f64>,
    s: f64,
    mut integrand: impl FnMut(usize, f64, &Vector<f64>) -> Result<S>,
) -> Result<S> {
    if !(s < t) {
        return Err(Error::domain(format!("convolution needs s < t (got s={s}, t={t})")));
    }
    let mut total = S::zero();
    for (k, &(r, wt)) in rule.time.iter().enumerate() {
        let (center, sd) = rule.bridge(x, t, y, s, r);
        let mut acc = S::zero();
        rule.for_each_space(&center, sd, |eta, w| {
            acc = acc + integrand(k, r, eta)? * S::lit(w);
            Ok(())
        })?;
        total = total + acc * S::lit(wt);
    }
    Ok(total)
}

/// Per-level statistics of the series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesDiagnostics {
    pub m_stop: usize,
    /// Weighted sup norms `‖Ψ_m‖` for `m = 1..=m_stop`.
    pub norms: Vec<f64>,
    /// `‖Ψ_{m+1}‖ / ‖Ψ_m‖`.
    pub ratios: Vec<f64>,
    /// Last term relative to the partial sum.
    pub tail_bound: f64,
    /// Empirical constant in `‖K_m‖ ≲ M^m H^{(m-1)/2} / Γ(1+m/2)`.
    pub empirical_m: f64,
    pub converged: bool,
}

impl SeriesDiagnostics {
    /// True once the ratio sequence has dropped below one and stays there.
    pub fn eventually_contracting(&self) -> bool {
        match self.ratios.iter().rposition(|&q| !(q < 1.0)) {
            None => !self.ratios.is_empty() || self.norms.iter().all(|&n| n == 0.0),
            Some(i) => i + 1 < self.ratios.len(),
        }
    }
}

/// `Γ(1 + m/2)`.
pub fn gamma_half(m: usize) -> f64 {
    let mut x = if m % 2 == 0 { 1.0 } else { 0.5 * std::f64::consts::PI.sqrt() };
    let mut arg = if m % 2 == 0 { 1.0 } else { 1.5 };
    while arg < 1.0 + m as f64 / 2.0 - 1e-9 {
        x *= arg;
        arg += 1.0;
    }
    x
}

/// The series `Φ(·, ·; y, s)` tabulated up to `horizon`.
#[derive(Clone, Debug)]
pub struct PhiTable<S> {
    /// `Σ_{m≥2} Ψ_m`; the first term is always evaluated in closed form.
    pub rest: KernelTable<S>,
    /// `Σ_{m≥1} Ψ_m` at the nodes, for norms, fits and serialisation.
    pub phi: KernelTable<S>,
    pub diagnostics: SeriesDiagnostics,
}

impl<S: Real> PhiTable<S> {
    /// Builds the table for source `(y, s)`.
    pub fn build(field: &CoefficientField<S>, y: &Vector<f64>, s: f64, horizon: f64, p: &GridParams) -> Result<Self> {
        p.validate()?;
        if !(s < horizon) {
            return Err(Error::domain(format!("table needs s < horizon (got s={s}, horizon={horizon})")));
        }
        let d = field.dim();
        let grid = SpaceTimeGrid::new(d, y, s, horizon, field.lambda(), field.breakpoints(), p);
        let mut rest = KernelTable::zeros(TableKind::Phi, grid.clone());
        let mut phi = KernelTable::zeros(TableKind::Phi, grid.clone());
        if field.is_x_independent() {
            return Ok(Self { rest, phi, diagnostics: SeriesDiagnostics { m_stop: 2, norms: vec![0.0, 0.0], ratios: vec![0.0], tail_bound: 0.0, empirical_m: 0.0, converged: true } });
        }
        let times = grid.time.times();
        let ns = grid.n_space();
        let py = field.point(y);
        let ke = KernelEval::new(field);

        // Ψ_1 in closed form.
        let mut level = KernelTable::zeros(TableKind::Km, grid.clone());
        for (n, &r) in times.iter().enumerate() {
            let sl = field.slice(s, r)?;
            let gf = GaussianFactor::new(&field.frozen_at(&py, &sl))?;
            let wgt = S::lit(grid.weight(r));
            for j in 0..ns {
                let x = grid.position(j, r);
                level.values[n * ns + j] = ke.k_frozen(&gf, &field.point(&x), &py, &sl, &(x - *y)) * wgt;
            }
        }
        let mut norms = vec![level.sup_norm()];
        for (a, b) in phi.values.iter_mut().zip(&level.values) {
            *a = *b;
        }

        let mut m = 1;
        let mut converged = false;
        while m < p.m_max {
            m += 1;
            let next = next_level(field, &grid, &times, &py, y, s, p, if m == 2 { None } else { Some(&level) })?;
            for ((a, b), c) in phi.values.iter_mut().zip(&next.values).zip(rest.values.iter_mut()) {
                *a = *a + *b;
                *c = *c + *b;
            }
            let nm = next.sup_norm();
            norms.push(nm);
            level = next;
            if nm <= p.tail_tol * phi.sup_norm() {
                converged = true;
                break;
            }
        }
        let ratios: Vec<f64> = norms.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
        let hs = (horizon - s).sqrt();
        let empirical_m = ratios
            .iter()
            .enumerate()
            .map(|(i, q)| q * gamma_half(i + 2) / gamma_half(i + 1) / hs)
            .fold(0.0, f64::max);
        let tail_bound = norms.last().copied().unwrap_or(0.0) / phi.sup_norm().max(f64::MIN_POSITIVE);
        let diagnostics = SeriesDiagnostics { m_stop: m, norms, ratios, tail_bound, empirical_m, converged };
        rest.fit_splines();
        phi.fit_splines();
        if !converged {
            return Err(Error::NonConvergence { what: format!("Φ series after {} terms", p.m_max), residual: tail_bound });
        }
        Ok(Self { rest, phi, diagnostics })
    }

    /// `Φ(x, r; y, s)`: closed-form first term plus interpolated remainder.
    pub fn eval(&self, field: &CoefficientField<S>, x: &Vector<f64>, r: f64) -> Result<S> {
        let at = self.at_time(field, r)?;
        Ok(self.eval_at(field, &at, x, &field.point(x)))
    }

    pub fn source(&self) -> (Vector<f64>, f64) {
        let g = &self.rest.grid;
        (Vector::from_slice(&g.y), g.time.s)
    }

    /// Everything about time `r` shared by all spatial evaluations.
    pub fn at_time(&self, field: &CoefficientField<S>, r: f64) -> Result<PhiSlice<S>> {
        let (y, s) = self.source();
        let sl = field.slice(s, r)?;
        let py = field.point(&y);
        let gf = GaussianFactor::new(&field.frozen_at(&py, &sl))?;
        let g = &self.rest.grid;
        Ok(PhiSlice { r, y, py, sl, gf, tw: g.time.weights(r), inv_w: S::lit(g.weight(r)).recip() })
    }

    #[inline]
    pub fn eval_at(&self, field: &CoefficientField<S>, at: &PhiSlice<S>, x: &Vector<f64>, px: &PointEval) -> S {
        let k1 = KernelEval::new(field).k_frozen(&at.gf, px, &at.py, &at.sl, &(*x - at.y));
        if self.diagnostics.norms.iter().all(|&n| n == 0.0) {
            return k1;
        }
        k1 + self.rest.interp_weighted(&at.tw, at.r, x) * at.inv_w
    }
}

/// Per-time data for [`PhiTable::eval_at`].
pub struct PhiSlice<S> {
    pub r: f64,
    y: Vector<f64>,
    py: PointEval,
    sl: TimeSlice<S>,
    gf: GaussianFactor<S>,
    tw: (usize, Vec<f64>),
    inv_w: S,
}

/// One convolution level: `inner = None` uses the closed-form `K`.
#[allow(clippy::too_many_arguments)]
fn next_level<S: Real>(
    field: &CoefficientField<S>,
    grid: &SpaceTimeGrid,
    times: &[f64],
    py: &PointEval,
    y: &Vector<f64>,
    s: f64,
    p: &GridParams,
    inner: Option<&KernelTable<S>>,
) -> Result<KernelTable<S>> {
    let ns = grid.n_space();
    let ke = KernelEval::new(field);
    let rows: Vec<Result<Vec<S>>> = times
        .par_iter()
        .map(|&rn| {
            let rule = ConvolutionRule::new(grid.dim, field.lambda(), s, rn, field.breakpoints(), p, Singular::Both);
            // per-quadrature-time data shared by all spatial nodes
            let mut outer_sl = Vec::with_capacity(rule.time.len());
            let mut inner_sl = Vec::with_capacity(rule.time.len());
            let mut inner_gf = Vec::with_capacity(rule.time.len());
            let mut tws = Vec::with_capacity(rule.time.len());
            for &(r, _) in &rule.time {
                outer_sl.push(field.slice(r, rn)?);
                match inner {
                    None => {
                        let sl = field.slice(s, r)?;
                        inner_gf.push(GaussianFactor::new(&field.frozen_at(py, &sl))?);
                        inner_sl.push(sl);
                    }
                    Some(tab) => tws.push((tab.grid.time.weights(r), S::lit(tab.grid.weight(r)).recip())),
                }
            }
            let wgt = S::lit(grid.weight(rn));
            let mut row = vec![S::zero(); ns];
            for (j, out) in row.iter_mut().enumerate() {
                let x = grid.position(j, rn);
                let px = field.point(&x);
                let at_x: Vec<(Matrix<S>, Vector<S>)> = outer_sl.iter().map(|sl| (field.value_at(&px, sl), field.gamma_at(&px, sl))).collect();
                let v = convolve(&rule, &x, rn, y, s, |k, r, eta| {
                    let pe = field.point(eta);
                    let (ax, gx) = &at_x[k];
                    let outer = ke.k_at(ax, gx, &pe, &outer_sl[k], &(x - *eta))?;
                    let inn = match inner {
                        None => ke.k_frozen(&inner_gf[k], &pe, py, &inner_sl[k], &(*eta - *y)),
                        Some(tab) => {
                            let (tw, inv_w) = &tws[k];
                            tab.interp_weighted(tw, r, eta) * *inv_w
                        }
                    };
                    Ok(outer * inn)
                })?;
                *out = v * wgt;
            }
            Ok(row)
        })
        .collect();
    let mut table = KernelTable::zeros(TableKind::Km, grid.clone());
    for (n, row) in rows.into_iter().enumerate() {
        table.values[n * ns..(n + 1) * ns].copy_from_slice(&row?);
    }
    Ok(table)
}

/// `Φ(x, t; y, s)` with series diagnostics, building the table for `(y, s)`
/// up to horizon `t`.
pub fn build_phi<S: Real>(field: &CoefficientField<S>, x: &Vector<f64>, t: f64, y: &Vector<f64>, s: f64, p: &GridParams) -> Result<(S, SeriesDiagnostics)> {
    let table = PhiTable::build(field, y, s, t, p)?;
    let v = table.eval(field, x, t)?;
    Ok((v, table.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff_fields::catalog;
    use crate::parametrix::eval_z;
    use approx::assert_relative_eq;

    fn v1(x: f64) -> Vector<f64> {
        Vector::from_slice(&[x])
    }

    #[test]
    fn gamma_half_values() {
        assert_relative_eq!(gamma_half(0), 1.0);
        assert_relative_eq!(gamma_half(1), 0.886_226_925_452_758, max_relative = 1e-14);
        assert_relative_eq!(gamma_half(4), 2.0);
        assert_relative_eq!(gamma_half(5), 3.323_350_970_447_842_6, max_relative = 1e-14);
    }

    #[test]
    fn x_independent_kernel_vanishes() {
        let f = CoefficientField::<f64>::constant_scalar(1, 1.3);
        assert_eq!(eval_k(&f, &v1(0.4), 1.0, &v1(-0.2), 0.1).unwrap(), 0.0);
        let (phi, diag) = build_phi(&f, &v1(0.4), 1.0, &v1(-0.2), 0.1, &GridParams::default()).unwrap();
        assert_eq!(phi, 0.0);
        assert_eq!(diag.m_stop, 2);
    }

    #[test]
    fn kernel_vanishes_on_diagonal_for_tanh() {
        let f = catalog::modulated_tanh(1, catalog::alternating_profile(2, 1.0, 1.0, 1.0), 0.25, 2.0).unwrap();
        for x in [0.0, 0.7, -1.3] {
            assert_eq!(eval_k(&f, &v1(x), 0.8, &v1(x), 0.2).unwrap(), 0.0);
        }
    }

    #[test]
    fn kernel_matches_hand_composition() {
        let f = catalog::modulated_tanh(1, catalog::alternating_profile(4, 1.0, 1.0, 1.5), 0.25, 1.75).unwrap();
        let (x, t, y, s) = (0.6, 0.9, -0.3, 0.15);
        let a = f.integrate_in_time(&v1(y), s, t).unwrap();
        let z = eval_z(&a.a, &v1(x - y), Order::Hessian).unwrap();
        let ax = f.eval(&v1(x), t).m[0][0];
        let ay = f.eval(&v1(y), t).m[0][0];
        let gx = f.divergence_gamma(&v1(x), t)[0];
        let want = (ax - ay) * z.hessian.m[0][0] + gx * z.gradient[0];
        assert_eq!(eval_k(&f, &v1(x), t, &v1(y), s).unwrap(), want);
    }

    #[test]
    fn frozen_gaussians_compose() {
        // Chapman–Kolmogorov through the generic convolution: ∫∫ Z Z / (t-s) = Z
        let f = CoefficientField::<f64>::constant_scalar(1, 1.2);
        let p = GridParams::default();
        let (x, t, y, s) = (0.5, 1.0, -0.4, 0.0);
        let rule = ConvolutionRule::new(1, 1.2, s, t, &[], &p, Singular::None);
        let v: f64 = convolve(&rule, &v1(x), t, &v1(y), s, |_, r, eta| {
            let a1 = f.integrate_in_time(eta, r, t)?;
            let a2 = f.integrate_in_time(&v1(y), s, r)?;
            Ok(eval_z(&a1.a, &(v1(x) - *eta), Order::Value)?.value * eval_z(&a2.a, &(*eta - v1(y)), Order::Value)?.value)
        })
        .unwrap();
        let z = eval_z(&f.integrate_in_time(&v1(y), s, t).unwrap().a, &v1(x - y), Order::Value).unwrap().value;
        assert_relative_eq!(v / (t - s), z, max_relative = 1e-10);
    }

    #[test]
    fn time_layout_interpolates_polynomials_within_pieces() {
        let lay = TimeLayout::new(0.0, 1.0, &[0.25, 0.6], 12, 3);
        let f = |rho: f64| 1.0 + rho - 0.5 * rho * rho;
        let vals: Vec<f64> = lay.pieces.iter().flat_map(|p| p.nodes.iter().map(|&r| f(r))).collect();
        for r in [0.01, 0.2, 0.3, 0.59, 0.61, 0.95, 1.0] {
            let (off, c) = lay.weights(r);
            let got: f64 = c.iter().enumerate().map(|(j, w)| w * vals[off + j]).sum();
            assert_relative_eq!(got, f(lay.rho(r)), max_relative = 1e-13);
        }
    }
}
