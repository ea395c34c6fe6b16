//! One-dimensional quadrature rules.
//!
//! The time rules here absorb the inverse square-root endpoint singularities
//! that every parametrix convolution carries: `r = s + (t-s)·sin²θ` when both
//! ends are singular, `r = s + h·v²` for one end, and a split at coefficient
//! breakpoints so that no rule straddles a jump in time.

use std::collections::BinaryHeap;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes.iter().zip(&self.weights).map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.on(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

const GK_X: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(a: f64, b: f64, f: &impl Fn(f64) -> f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut k = GK_WK[7] * fc;
    let mut g = GK_WG[3] * fc;
    for i in 0..7 {
        let dx = half * GK_X[i];
        let s = f(mid - dx) + f(mid + dx);
        k += GK_WK[i] * s;
        if i % 2 == 1 {
            g += GK_WG[i / 2] * s;
        }
    }
    (k * half, ((k - g) * half).abs())
}

/// Globally adaptive Gauss–Kronrod (7/15) quadrature to absolute tolerance
/// `tol`: the panel with the largest error estimate is bisected until the
/// summed estimate meets the tolerance.
pub fn adaptive_gk(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let panel = |lo: f64, hi: f64| {
        let (v, e) = gk15(lo, hi, &f);
        Panel { lo, hi, v, e }
    };
    let mut heap = BinaryHeap::new();
    heap.push(panel(a, b));
    let (mut total, mut err) = (heap.peek().unwrap().v, heap.peek().unwrap().e);
    let mut evals = 1usize;
    while err > tol.max(1e-15 * total.abs()) {
        let worst = heap.pop().unwrap();
        if evals > 20_000 || (worst.hi - worst.lo).abs() < 1e-13 * (b - a).abs() {
            return Err(Error::NonConvergence { what: "adaptive quadrature".into(), residual: err });
        }
        let m = 0.5 * (worst.lo + worst.hi);
        let (l, r) = (panel(worst.lo, m), panel(m, worst.hi));
        total += l.v + r.v - worst.v;
        err += l.e + r.e - worst.e;
        heap.push(l);
        heap.push(r);
        evals += 2;
    }
    // re-sum to shed the drift of the running updates
    Ok(heap.iter().map(|p| p.v).sum())
}

struct Panel {
    lo: f64,
    hi: f64,
    v: f64,
    e: f64,
}

impl PartialEq for Panel {
    fn eq(&self, o: &Self) -> bool {
        self.e == o.e
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Panel {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.e.total_cmp(&o.e)
    }
}

/// Node/weight pairs for `∫_s^t f(r) dr`.
pub type Rule = Vec<(f64, f64)>;

/// `r = s + (t-s)·sin²θ` with Gauss–Legendre nodes in `θ ∈ (0, π/2)`.
///
/// The weights include the Jacobian `2(t-s)·sinθ·cosθ`, which cancels
/// `1/√((t-r)(r-s))` exactly.
pub fn sin2_rule(s: f64, t: f64, n: usize) -> Rule {
    let gl = GaussLegendre::new(n);
    gl.on(0.0, FRAC_PI_2)
        .map(|(th, w)| {
            let (sn, cs) = th.sin_cos();
            (s + (t - s) * sn * sn, w * 2.0 * (t - s) * sn * cs)
        })
        .collect()
}

/// Which endpoints of an interval carry an inverse square-root singularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Singular {
    None,
    Left,
    Right,
    Both,
}

impl Singular {
    fn left(self) -> bool {
        matches!(self, Singular::Left | Singular::Both)
    }
    fn right(self) -> bool {
        matches!(self, Singular::Right | Singular::Both)
    }
}

/// Quadrature on `[a, b]` that resolves a square-root singularity at the
/// endpoints flagged in `sing` with `n` nodes.
pub fn piece_rule(a: f64, b: f64, n: usize, sing: Singular, gl: &GaussLegendre) -> Rule {
    debug_assert_eq!(gl.nodes.len(), n);
    let h = b - a;
    match sing {
        Singular::Both => gl
            .on(0.0, FRAC_PI_2)
            .map(|(th, w)| {
                let (sn, cs) = th.sin_cos();
                (a + h * sn * sn, w * 2.0 * h * sn * cs)
            })
            .collect(),
        Singular::Left => gl.on(0.0, 1.0).map(|(v, w)| (a + h * v * v, w * 2.0 * h * v)).collect(),
        Singular::Right => gl.on(0.0, 1.0).map(|(v, w)| (b - h * v * v, w * 2.0 * h * v)).collect(),
        Singular::None => gl.on(a, b).collect(),
    }
}

/// Time rule on `[s, t]` split at the interior `breaks`.
///
/// Nodes are distributed over pieces in proportion to the arcsine measure
/// `dθ` of the unsplit sin² rule, with at least `min_per_piece` per piece.
pub fn split_time_rule(s: f64, t: f64, breaks: &[f64], n: usize, min_per_piece: usize, sing: Singular) -> Rule {
    let inner: Vec<f64> = breaks.iter().copied().filter(|&b| b > s && b < t).collect();
    if inner.is_empty() {
        return piece_rule(s, t, n, sing, &GaussLegendre::new(n));
    }
    let mut edges = Vec::with_capacity(inner.len() + 2);
    edges.push(s);
    edges.extend(inner);
    edges.push(t);
    let theta = |r: f64| ((r - s) / (t - s)).clamp(0.0, 1.0).sqrt().asin();
    let npieces = edges.len() - 1;
    let mut rule = Vec::new();
    let mut cache: Vec<Option<GaussLegendre>> = vec![None; n.max(min_per_piece) + 2];
    for p in 0..npieces {
        let (a, b) = (edges[p], edges[p + 1]);
        let frac = (theta(b) - theta(a)) / FRAC_PI_2;
        let np = ((n as f64 * frac).round() as usize).clamp(min_per_piece.max(1), n.max(min_per_piece));
        let ps = match (p == 0 && sing.left(), p + 1 == npieces && sing.right()) {
            (true, true) => Singular::Both,
            (true, false) => Singular::Left,
            (false, true) => Singular::Right,
            (false, false) => Singular::None,
        };
        let gl = cache[np].get_or_insert_with(|| GaussLegendre::new(np));
        rule.extend(piece_rule(a, b, np, ps, gl));
    }
    rule
}

/// Uniform trapezoid nodes on `[-v, v]` with `n` points (endpoint weights halved).
pub fn trapezoid(v: f64, n: usize) -> Rule {
    assert!(n >= 2);
    let h = 2.0 * v / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
            (-v + i as f64 * h, w)
        })
        .collect()
}
