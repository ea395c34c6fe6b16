//! The verification batteries behind each named suite.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use super::config::{CoefficientFamily, ExperimentConfig};
use super::report::*;
use crate::coeff_fields::CoefficientField;
use crate::error::{Error, Result};
use crate::fundamental_solution::{AronsonFit, FundamentalSolution};
use crate::kernel_iteration::GridParams;
use crate::linalg::{Matrix, Vector};
use crate::malliavin::{bound_chain, bump_derivative, simulate_paths, ChainSetup, PathBundle, RandomCoefficient};
use crate::mild_solution::*;
use crate::parametrix::FitGrid;
use crate::quadrature::{sin2_rule, split_time_rule, Singular};
use crate::reference_fdm::{gamma_batch, FdmConfig};

pub const CRITERIA: [(u8, &str); 11] = [
    (1, "parametrix exactness"),
    (2, "finite-difference oracle agreement"),
    (3, "Aronson envelopes"),
    (4, "time-roughness insensitivity"),
    (5, "series control"),
    (6, "singular quadrature"),
    (7, "Malliavin layer"),
    (8, "mild-solution cross-validation"),
    (9, "weak-solution residual"),
    (10, "small-time decay"),
    (11, "gate correctness"),
];

/// Criteria run by a suite, in order.
pub fn suite_criteria(name: &str) -> Result<Vec<u8>> {
    Ok(match name {
        "deterministic-kernel" => vec![1, 2, 5, 6, 11],
        "aronson-fit" => vec![3, 4, 11],
        "malliavin" => vec![7, 11],
        "mild-solution" => vec![8, 9, 10, 11],
        "full" => (1..=11).collect(),
        other => return Err(Error::config("suite", format!("unknown suite {other:?}"))),
    })
}

fn title(id: u8) -> &'static str {
    CRITERIA[id as usize - 1].1
}

fn v1(x: f64) -> Vector<f64> {
    Vector::from_slice(&[x])
}

fn along(d: usize, f: impl Fn(usize) -> f64) -> Vector<f64> {
    Vector::from_slice(&(0..d).map(f).collect::<Vec<_>>())
}

/// Fundamental solutions and envelope fits shared between criteria.
pub struct Battery<'a> {
    cfg: &'a ExperimentConfig,
    solutions: BTreeMap<String, FundamentalSolution<f64>>,
    fits: BTreeMap<String, [AronsonFit; 2]>,
    pub plots: PlotData,
}

/// Report, plot data and wall-clock seconds per criterion.
pub struct SuiteOutput {
    pub report: Report,
    pub plots: PlotData,
    pub timing: Vec<(u8, f64)>,
}

impl<'a> Battery<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg, solutions: BTreeMap::new(), fits: BTreeMap::new(), plots: PlotData::default() }
    }

    fn seed(&self, criterion: u8) -> u64 {
        self.cfg.seed.wrapping_add(1000 * criterion as u64)
    }

    /// Coarser tables in two dimensions, where full resolution costs minutes.
    fn params(&self, dim: usize) -> GridParams {
        let g = &self.cfg.grid;
        match dim {
            1 => g.clone(),
            _ => GridParams { n_u: g.n_u.min(25), n_q: g.n_q.min(16), ..g.clone() },
        }
    }

    fn fit_setup(&self, dim: usize) -> (FitGrid, Vec<Vector<f64>>) {
        let t = self.cfg.model.horizon;
        match dim {
            1 => (FitGrid::geometric(vec![0.0], 0.02 * t, t, 6, 13, 6.0), vec![v1(-1.0), v1(0.0), v1(1.0)]),
            _ => (FitGrid::geometric(vec![0.0], 0.05 * t, t, 5, 9, 6.0), vec![Vector::zeros(dim)]),
        }
    }

    fn instances(&self) -> Result<Vec<(String, usize, CoefficientField<f64>)>> {
        let mut out = Vec::new();
        for d in [1, 2] {
            out.extend(self.cfg.instances(d)?.into_iter().map(|(n, f)| (n, d, f)));
        }
        Ok(out)
    }

    fn solution(&mut self, name: &str, dim: usize, field: &CoefficientField<f64>) -> Result<&FundamentalSolution<f64>> {
        if !self.solutions.contains_key(name) {
            let fs = FundamentalSolution::new(field.clone(), self.cfg.model.horizon, self.params(dim))?;
            self.solutions.insert(name.to_string(), fs);
        }
        Ok(&self.solutions[name])
    }

    fn fits(&mut self, name: &str, dim: usize, field: &CoefficientField<f64>) -> Result<[AronsonFit; 2]> {
        if let Some(f) = self.fits.get(name) {
            return Ok(f.clone());
        }
        let (grid, ys) = self.fit_setup(dim);
        let fs = self.solution(name, dim, field)?;
        let pair = [fs.aronson_fit(0, &ys, &grid)?, fs.aronson_fit(1, &ys, &grid)?];
        let mut rows = Vec::new();
        for fit in &pair {
            let env = &fit.fit.envelope;
            for (w2, tau, v, _) in fs.envelope_samples(fit.order, &ys, &grid)? {
                let sd = w2 / tau;
                rows.push(CollapseRow {
                    instance: name.to_string(),
                    order: fit.order,
                    scaled_distance: sd,
                    scaled_value: v * tau.powf(0.5 * (dim + fit.order) as f64),
                    envelope: env.c * (-env.big_c * sd).exp(),
                });
            }
        }
        self.plots.collapse.extend(rows);
        self.fits.insert(name.to_string(), pair.clone());
        Ok(pair)
    }

    pub fn run(&mut self, id: u8) -> Result<CriterionResult> {
        match id {
            1 => self.parametrix_exactness(),
            2 => self.oracle_agreement(),
            3 => self.aronson_envelopes(),
            4 => self.time_roughness(),
            5 => self.series_control(),
            6 => self.singular_quadrature(),
            7 => self.malliavin_layer(),
            8 => self.mild_cross_validation(),
            9 => self.weak_residual(),
            10 => self.small_time_decay(),
            11 => self.gates(),
            other => Err(Error::config("criterion", format!("no criterion {other}"))),
        }
    }

    fn parametrix_exactness(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(1, title(1));
        let cfg = self.cfg;
        let horizon = cfg.model.horizon;
        let profile = cfg.profile(cfg.coefficient.rough_breakpoints);
        for d in [1, 2] {
            let cases = [
                ("constant", CoefficientField::constant_scalar(d, 1.3)),
                ("piecewise", CoefficientField::piecewise_scalar(Matrix::identity(d), profile.clone(), cfg.model.lambda)?),
            ];
            for (label, field) in cases {
                let fs = FundamentalSolution::new(field, horizon, self.params(d))?;
                let (mut worst, mut mass): (f64, f64) = (0.0, 0.0);
                for (s, t) in [(0.0, 0.1 * horizon), (0.3 * horizon, horizon), (0.0, horizon)] {
                    // integrated diffusivity, independently of the frozen-integral route
                    let v = if label == "constant" { 1.3 * (t - s) } else { profile.integral(s, t) };
                    let y = along(d, |i| 0.2 * i as f64 - 0.1);
                    for k in 0..9 {
                        let w = along(d, |i| (k as f64 - 4.0) * 0.5 * v.sqrt() * if i == 0 { 1.0 } else { 0.5 });
                        let want = (4.0 * PI * v).powf(-0.5 * d as f64) * (-w.norm2() / (4.0 * v)).exp();
                        let got = fs.gamma(&(y + w), t, &y, s)?;
                        worst = worst.max((got - want).abs() / want);
                    }
                    if d == 1 {
                        mass = mass.max(fs.mass_residual_x(t, &y, s, 64)?.absolute);
                    }
                }
                out.push(Check::at_most(format!("{label}-{d}d relative error"), worst, 1e-10, "closed-form Gaussian"));
                if d == 1 {
                    out.push(Check::at_most(format!("{label}-{d}d mass defect"), mass, 1e-10, "unit mass"));
                }
            }
        }
        Ok(out)
    }

    fn oracle_agreement(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(2, title(2));
        let cfg = self.cfg;
        let horizon = cfg.model.horizon;
        let bp = cfg.coefficient.breakpoints;
        let field = cfg.field(1, bp)?;
        let xs: Vec<Vector<f64>> = (0..9).map(|i| v1(-2.0 + 0.5 * i as f64)).collect();
        let pairs = [(0.0, 0.5 * horizon), (0.0, horizon), (0.25 * horizon, horizon)];
        let starts = [0.0, 0.25 * horizon];
        let sources: Vec<(Vector<f64>, f64)> = starts.iter().flat_map(|&s| xs.iter().map(move |y| (*y, s))).collect();
        let fdm_cfg = FdmConfig::for_field(&field, horizon, cfg.fdm.h, cfg.fdm.tau);
        let oracle = gamma_batch(&field, &xs, &[0.5 * horizon, horizon], &sources, &fdm_cfg)?;
        let name = format!("tanh-{bp}bp-1d");
        let fs = self.solution(&name, 1, &field)?;
        let (mut worst, mut oracle_err): (f64, f64) = (0.0, 0.0);
        for (s, t) in pairs {
            let ti = if t < horizon { 0 } else { 1 };
            for (k, (y, _)) in sources.iter().enumerate().filter(|(_, src)| src.1 == s) {
                let got: Vec<f64> = xs.iter().map(|x| fs.gamma(x, t, y, s)).collect::<Result<_>>()?;
                let want = &oracle[k][ti];
                let peak = want.iter().map(|o| o.value.abs()).fold(0.0, f64::max);
                for (g, o) in got.iter().zip(want) {
                    worst = worst.max((g - o.value).abs() / peak);
                    oracle_err = oracle_err.max(o.error_estimate / peak);
                }
            }
        }
        out.push(Check::at_most("relative L∞ error (peak-normalized)", worst, 1e-2, "finite-difference point source"));
        out.push(Check::info("oracle step-extrapolation estimate", oracle_err, "finite-difference point source"));
        Ok(out)
    }

    fn aronson_envelopes(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(3, title(3));
        for (name, d, field) in self.instances()? {
            let fits = self.fits(&name, d, &field)?;
            for (fit, quantity) in fits.iter().zip(["Γ", "√(t-s)|∇Γ|"]) {
                let f = &fit.fit;
                out.envelopes.push(FittedEnvelope {
                    instance: name.clone(),
                    quantity: quantity.into(),
                    c: f.envelope.c,
                    big_c: f.envelope.big_c,
                    refined_c: f.refined_c,
                    drift: f.drift,
                });
                out.push(Check::holds(format!("{name} order {} finite", fit.order), f.finite, "envelope fit"));
                out.push(Check::at_most(format!("{name} order {} refinement drift", fit.order), f.drift, 0.05, "2× refined grid"));
            }
            let tau_min = self.fit_setup(d).0.taus[0];
            let peak = fits[0].fit.envelope.c * tau_min.powf(-0.5 * d as f64);
            out.push(Check::at_least(format!("{name} minimum of Γ over its peak"), fits[0].min_value / peak, -1e-6, "positivity"));
            if name.starts_with("identity") {
                let heat = (4.0 * PI).powf(-0.5 * d as f64);
                let env = &fits[0].fit.envelope;
                out.push(Check::at_most(format!("{name} amplitude vs (4π)^(-d/2)"), (env.c / heat - 1.0).abs(), 0.01, "heat kernel"));
                out.push(Check::at_most(format!("{name} rate vs 1/4"), (env.big_c / 0.25 - 1.0).abs(), 0.01, "heat kernel"));
            }
        }
        Ok(out)
    }

    fn time_roughness(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(4, title(4));
        let cfg = self.cfg;
        let c = &cfg.coefficient;
        let mut amps = Vec::new();
        for bp in [c.breakpoints, c.rough_breakpoints] {
            let (name, field) = match c.family {
                CoefficientFamily::Identity => ("identity-1d".to_string(), CoefficientField::constant_scalar(1, 1.0)),
                CoefficientFamily::ModulatedTanh => (format!("tanh-{bp}bp-1d"), cfg.field(1, bp)?),
            };
            let fit = self.fits(&name, 1, &field)?[1].fit.envelope.c;
            out.push(Check::info(format!("{name} gradient amplitude"), fit, "envelope fit"));
            amps.push(fit);
        }
        let ratio = amps[0].max(amps[1]) / amps[0].min(amps[1]);
        out.push(Check::at_most(format!("gradient amplitude ratio {} vs {} breakpoints", c.breakpoints, c.rough_breakpoints), ratio, 2.0, "envelope fits"));
        Ok(out)
    }

    fn series_control(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(5, title(5));
        out.push(Check::at_most("tail tolerance", self.cfg.grid.tail_tol, 1e-8, "configuration"));
        for (name, d, field) in self.instances()? {
            let table = self.solution(&name, d, &field)?.phi_table(&Vector::zeros(d), 0.0)?;
            let diag = &table.diagnostics;
            out.push(Check::holds(format!("{name} converged"), diag.converged, "tail bound"));
            out.push(Check::at_most(format!("{name} m_stop"), diag.m_stop as f64, 8.0, "gamma-function bound"));
            out.push(Check::holds(format!("{name} ratios eventually below 1"), diag.eventually_contracting(), "gamma-function bound"));
            out.push(Check::info(format!("{name} empirical M"), diag.empirical_m, "gamma-function bound"));
            for (m, norm) in diag.norms.iter().enumerate() {
                self.plots.k_ratios.push(RatioRow { instance: name.clone(), m: m + 1, norm: *norm, ratio: diag.ratios.get(m).copied() });
            }
        }
        Ok(out)
    }

    fn singular_quadrature(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(6, title(6));
        let cfg = self.cfg;
        let horizon = cfg.model.horizon;
        let profile = cfg.profile(cfg.coefficient.rough_breakpoints);
        let weight = |rule: Vec<(f64, f64)>, s: f64, t: f64| -> f64 { rule.iter().map(|&(r, w)| w / ((t - r) * (r - s)).sqrt()).sum() };
        let (s, t) = (0.1 * horizon, 0.9 * horizon);
        let plain = weight(sin2_rule(s, t, 16), s, t);
        out.push(Check::at_most("sin² rule vs π", (plain / PI - 1.0).abs(), 1e-10, "closed form"));
        let split = weight(split_time_rule(s, t, profile.breaks(), 64, 8, Singular::Both), s, t);
        out.push(Check::at_most("split rule vs π", (split / PI - 1.0).abs(), 1e-10, "closed form"));
        let alpha = cfg.alpha_params(1)?.alpha;
        let fields = [
            ("constant", CoefficientField::constant_scalar(1, 1.0)),
            ("piecewise", CoefficientField::piecewise_scalar(Matrix::identity(1), profile, cfg.model.lambda)?),
        ];
        for (label, field) in fields {
            let fs = FundamentalSolution::new(field, horizon, cfg.grid.clone())?;
            let mut worst: f64 = 0.0;
            for a in [0.3, alpha, 0.85] {
                for (x, t, y, s) in [(0.3, horizon, 0.0, 0.0), (-1.0, 0.8 * horizon, 0.5, 0.2 * horizon)] {
                    worst = worst.max(interpolation_identity(&fs, a, x, t, y, s, 12, 48)?.relative());
                }
            }
            out.push(Check::at_most(format!("interpolation identity ({label})"), worst, 1e-3, "Γ itself"));
        }
        Ok(out)
    }

    fn malliavin_layer(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(7, title(7));
        let cfg = self.cfg;
        let ms = &cfg.malliavin;
        let horizon = cfg.model.horizon;
        let spec = cfg.sde();
        let bundle = simulate_paths(&spec, ms.paths, horizon, ms.steps, self.seed(7))?;
        let n = ms.steps;
        let mut worst: f64 = 0.0;
        for p in 0..bundle.n_paths().min(8) {
            for k in [0, n / 7, n / 2, 9 * n / 10] {
                let fd = bump_derivative(&spec, &bundle, p, k, ms.bump_eps, |xi| Ok(xi[n]))?;
                let d = bundle.first_variation(p, k, n);
                worst = worst.max((fd - d).abs() / d.abs().max(1e-3));
            }
        }
        out.push(Check::at_most(format!("first variation vs bump at Δ = {:.0e}", horizon / n as f64), worst, 5e-2, "pathwise bump"));
        let setup = ChainSetup {
            pieces: ms.pieces,
            r: ms.bump_time,
            sources: vec![0.0, 0.7],
            grid: FitGrid::geometric(vec![0.0, 0.5 * horizon], 0.02 * horizon, 0.5 * horizon, 6, 11, 3.0),
            params: cfg.grid.clone(),
        };
        let chain = bound_chain(&cfg.random_coefficient(), &bundle, &setup)?;
        out.push(Check::at_most("|D_r a| / (K_a ψ)", chain.coefficient.max_ratio, 1.0, "dominating process"));
        for (label, fit) in [("D_rK", &chain.kernel), ("D_rΦ", &chain.phi), ("D_rΓ", &chain.gamma), ("√(t-s)|D_r∇Γ|", &chain.grad_gamma)] {
            out.envelopes.push(FittedEnvelope {
                instance: "random".into(),
                quantity: label.into(),
                c: fit.envelope.c,
                big_c: fit.envelope.big_c,
                refined_c: fit.refined_c,
                drift: fit.drift,
            });
            out.push(Check::holds(format!("{label} finite"), fit.finite, "envelope fit"));
            out.push(Check::at_most(format!("{label} refinement drift"), fit.drift, 0.05, "2× refined grid"));
        }
        out.push(Check::at_least("sampled points per path", chain.points_per_path as f64, 1000.0, "configuration"));
        out.push(Check::at_least("paths", chain.paths as f64, 32.0, "configuration"));
        Ok(out)
    }

    fn mild_cross_validation(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(8, title(8));
        let cfg = self.cfg;
        let mi = &cfg.mild;
        let horizon = cfg.model.horizon;
        let ap = cfg.alpha_params(1)?;
        let bundle = simulate_paths(&cfg.sde(), mi.n_paths, horizon, mi.steps, self.seed(8))?;
        let mut agreement = |instance: &str, x: f64, a: &MildSolutionEstimate, b: &MildSolutionEstimate| {
            self.plots.agreement.push(AgreementRow {
                instance: instance.into(),
                x,
                t: horizon,
                v_skorohod: a.value,
                v_fractional: b.value,
                combined_se: a.combined_se(b),
            });
        };
        let (coef, noise) = (RandomCoefficient::x_independent(), cfg.stochastic_noise()?);
        for &x in &mi.points {
            let sk = skorohod_integral(&coef, &bundle, &noise, x, horizon)?;
            let fr = fractional_representation(&coef, &bundle, &noise, x, horizon, &ap, &mi.fractional)?;
            let gap = sk.samples.iter().zip(&fr.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.push(Check::at_most(format!("stochastic x={x}: |skorohod − fractional| / combined SE"), (sk.value - fr.value).abs() / sk.combined_se(&fr), 3.0, "combined standard error"));
            out.push(Check::info(format!("stochastic x={x}: largest pathwise gap"), gap, "pathwise"));
            agreement("stochastic", x, &sk, &fr);
        }
        let (coef, noise) = (cfg.deterministic_coefficient(), cfg.deterministic_noise()?);
        let x = mi.points[0];
        let sk = skorohod_integral(&coef, &bundle, &noise, x, horizon)?;
        let fr = fractional_representation(&coef, &bundle, &noise, x, horizon, &ap, &mi.fractional)?;
        let ito = ito_adapted(&coef, &bundle, &noise, x, horizon)?;
        agreement("deterministic", x, &sk, &fr);
        for (label, est) in [("skorohod", &sk), ("fractional", &fr)] {
            out.push(Check::at_most(format!("deterministic: |{label} − itô| / combined SE"), (est.value - ito.value).abs() / est.combined_se(&ito), 3.0, "adapted Itô sum"));
        }
        let model = PathModel::new(&coef, &bundle, 0, &noise)?;
        let exact = deterministic_variance(&model, x, horizon, 8)?;
        let se = exact * (2.0 / (sk.n_paths as f64 - 1.0)).sqrt();
        out.push(Check::at_most("deterministic: |sample variance − exact| / SE", (sk.variance() - exact).abs() / se, 3.0, "Itô isometry by quadrature"));
        Ok(out)
    }

    fn weak_residual(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(9, title(9));
        let cfg = self.cfg;
        let mi = &cfg.mild;
        let horizon = cfg.model.horizon;
        let spec = cfg.sde();
        let fine = simulate_paths(&spec, mi.weak_paths, horizon, 2 * mi.steps, self.seed(9))?;
        let coarse_db: Vec<Vec<f64>> = fine.increments.iter().map(|p| p.chunks(2).map(|c| c[0] + c[1]).collect()).collect();
        let coarse = PathBundle::from_increments(&spec, horizon / mi.steps as f64, coarse_db, self.seed(9), 0)?;
        let form = |nx| WeakForm { test: BumpFunction { center: 0.3, radius: 1.2 }, nx, box_half_width: 5.0 };
        let levels = |coef: &RandomCoefficient, noise: &NoiseField| -> Result<(WeakResidualStats, WeakResidualStats)> {
            Ok((
                weak_solution_residual(coef, &coarse, noise, &form(mi.weak_nx), horizon)?,
                weak_solution_residual(coef, &fine, noise, &form(2 * mi.weak_nx), horizon)?,
            ))
        };
        let (c, f) = levels(&cfg.deterministic_coefficient(), &cfg.deterministic_noise()?)?;
        out.push(Check::info("deterministic E[R²] coarse", c.mean_sq, "Monte Carlo"));
        out.push(Check::info("deterministic E[R²] fine", f.mean_sq, "Monte Carlo"));
        out.push(Check::at_least("deterministic E[R²] reduction under (Δ, h) halving", c.mean_sq / f.mean_sq, 2.0, "joint refinement"));
        let (c, f) = levels(&RandomCoefficient::x_independent(), &cfg.stochastic_noise()?)?;
        // E[(R−T)²] falls like Δ⁴ as in the deterministic case, so the limit is (16 E_f − E_c)/15
        let z: Vec<f64> = c.residuals.iter().zip(&f.residuals).map(|(a, b)| (16.0 * b.reduced().powi(2) - a.reduced().powi(2)) / 15.0).collect();
        let (limit, se) = mean_se(&z);
        out.push(Check::info("stochastic E[(R−T)²] coarse", c.reduced_mean_sq, "Monte Carlo"));
        out.push(Check::info("stochastic E[(R−T)²] fine", f.reduced_mean_sq, "Monte Carlo"));
        out.push(Check::info("stochastic extrapolated E[(R−T)²]", limit, "Richardson"));
        out.push(Check::at_most("stochastic |extrapolated E[(R−T)²]| / SE", limit.abs() / se.max(f64::MIN_POSITIVE), 3.0, "refined extrapolation"));
        out.push(Check::info("stochastic E[R²] fine", f.mean_sq, "Monte Carlo"));
        out.push(Check::info("stochastic E[T²] fine", f.trace_mean_sq, "Monte Carlo"));
        Ok(out)
    }

    fn small_time_decay(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(10, title(10));
        let cfg = self.cfg;
        let horizon = cfg.model.horizon;
        let kappa = cfg.alpha_params(1)?.moment_order();
        let bundle = simulate_paths(&cfg.sde(), cfg.mild.decay_paths, horizon, 64, self.seed(10))?;
        let xs: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let cases = [
            ("stochastic", RandomCoefficient::x_independent(), cfg.stochastic_noise()?),
            ("deterministic", cfg.deterministic_coefficient(), cfg.deterministic_noise()?),
        ];
        for (label, coef, noise) in cases {
            let pts: Vec<(f64, f64)> = [64.0, 32.0, 16.0]
                .iter()
                .map(|d| {
                    let h = horizon / d;
                    Ok((h, sampled_sup_moment(&coef, &bundle, &noise, &xs, h, kappa)?.0))
                })
                .collect::<Result<_>>()?;
            let fit = small_time_decay(&pts)?;
            for (h, m) in &pts {
                self.plots.decay.push(DecayRow { instance: label.into(), log_h: h.ln(), log_moment: m.ln() });
            }
            out.push(Check::holds(format!("{label} moments non-trivial"), !fit.trivial, "sampled sup-moment"));
            out.push(Check::info(format!("{label} fitted η"), fit.slope, "log-log regression"));
            out.push(Check::holds(format!("{label} η > 0"), fit.slope > 0.0, "log-log regression"));
        }
        Ok(out)
    }

    fn gates(&mut self) -> Result<CriterionResult> {
        let mut out = CriterionResult::new(11, title(11));
        let base = self.cfg;
        let mutate = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.validate()
        };
        let cases: [(&str, &str, Box<dyn Fn(&mut ExperimentConfig)>); 5] = [
            ("q = 5, d = 1", "D3", Box::new(|c| c.model.q = 5.0)),
            ("α above the interval", "alpha", Box::new(|c| c.model.alpha = Some(0.95))),
            ("λ < 1", "H1", Box::new(|c| c.model.lambda = 0.5)),
            ("K_a leaves the ellipticity band", "H1", Box::new(|c| {
                c.coefficient.family = CoefficientFamily::ModulatedTanh;
                c.model.k_a = c.model.lambda;
            })),
            ("N ≤ d/2", "D1", Box::new(|c| c.model.noise_decay = 0.4)),
        ];
        for (label, want, f) in cases {
            let ok = match mutate(&*f) {
                Err(Error::Config { tag, message }) => tag == want && (want != "D3" || message.contains("(D3) p > q > 2d+4")),
                _ => false,
            };
            out.push(Check::holds(format!("{label} rejected with tag {want}"), ok, "validation"));
        }
        let text = base.to_toml()?;
        out.push(Check::holds("config round-trip", ExperimentConfig::from_toml(&text)? == *base, "parse(serialize(config))"));
        let again = |seed| -> Result<Vec<u64>> {
            let b = simulate_paths(&base.sde(), 4, base.model.horizon, 16, seed)?;
            Ok(b.increments.concat().iter().map(|v| v.to_bits()).collect())
        };
        out.push(Check::holds("seeded paths repeat bit for bit", again(base.seed)? == again(base.seed)?, "determinism"));
        Ok(out)
    }
}

/// Runs every criterion of `cfg.suite` in order.
pub fn run_suite(cfg: &ExperimentConfig, mut progress: impl FnMut(&CriterionResult, f64)) -> Result<SuiteOutput> {
    cfg.validate()?;
    let mut battery = Battery::new(cfg);
    let mut results = Vec::new();
    let mut timing = Vec::new();
    for id in suite_criteria(&cfg.suite)? {
        let start = Instant::now();
        let r = battery.run(id)?;
        let secs = start.elapsed().as_secs_f64();
        progress(&r, secs);
        timing.push((id, secs));
        results.push(r);
    }
    let report = Report::new(cfg, results)?;
    Ok(SuiteOutput { report, plots: battery.plots, timing })
}
