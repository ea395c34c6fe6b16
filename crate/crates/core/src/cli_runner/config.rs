//! Experiment configuration: TOML in, validated, TOML out.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coeff_fields::{catalog, CoefficientField};
use crate::error::{Error, Result};
use crate::kernel_iteration::GridParams;
use crate::malliavin::{Profile, RandomCoefficient, RandomTerm, ScalarMap, SdeSpec};
use crate::mild_solution::{AlphaParams, FractionalRule, NoiseField};
use crate::reference_fdm::FdmConfig;

pub const SUITES: [&str; 5] = ["deterministic-kernel", "aronson-fit", "malliavin", "mild-solution", "full"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: String,
    pub seed: u64,
    /// Execution settings; neither enters the report.
    pub run: RunSettings,
    pub model: ModelConfig,
    pub coefficient: CoefficientConfig,
    pub noise: NoiseConfig,
    pub grid: GridParams,
    pub fdm: FdmSettings,
    pub malliavin: MalliavinSettings,
    pub mild: MildSettings,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub out_dir: Option<String>,
    /// Worker threads; 0 uses the hardware parallelism.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lambda: f64,
    pub k_a: f64,
    pub horizon: f64,
    pub p: f64,
    pub q: f64,
    /// Spatial decay exponent `N` of the noise.
    pub noise_decay: f64,
    /// Midpoint of the admissible interval when absent.
    pub alpha: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { lambda: 2.0, k_a: 0.25, horizon: 1.0, p: 14.0, q: 7.0, noise_decay: 1.0, alpha: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientFamily {
    Identity,
    ModulatedTanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomFamily {
    XIndependent,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdeFamily {
    Generic,
    OrnsteinUhlenbeck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub family: CoefficientFamily,
    /// Alternating values of the time profile.
    pub profile_lo: f64,
    pub profile_hi: f64,
    pub breakpoints: usize,
    pub rough_breakpoints: usize,
    /// Random coefficient of the Malliavin suite.
    pub random: RandomFamily,
    pub sde: SdeFamily,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            family: CoefficientFamily::ModulatedTanh,
            profile_lo: 1.0,
            profile_hi: 1.5,
            breakpoints: 2,
            rough_breakpoints: 64,
            random: RandomFamily::Mixed,
            sde: SdeFamily::Generic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Width `ℓ` of the spatial profile.
    pub width: f64,
    /// Amplitude of the deterministic instance.
    pub deterministic_amplitude: f64,
    /// Diffusivity of the deterministic instance.
    pub deterministic_diffusivity: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { width: 1.0, deterministic_amplitude: 1.0, deterministic_diffusivity: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmSettings {
    pub h: f64,
    pub tau: f64,
}

impl Default for FdmSettings {
    fn default() -> Self {
        Self { h: 0.02, tau: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MalliavinSettings {
    pub paths: usize,
    pub steps: usize,
    pub pieces: usize,
    pub bump_time: f64,
    pub bump_eps: f64,
}

impl Default for MalliavinSettings {
    fn default() -> Self {
        Self { paths: 32, steps: 1000, pieces: 8, bump_time: 0.25, bump_eps: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MildSettings {
    pub n_paths: usize,
    pub steps: usize,
    pub points: Vec<f64>,
    pub fractional: FractionalRule,
    pub weak_paths: usize,
    /// Spatial intervals of the weak form on the coarse level.
    pub weak_nx: usize,
    pub decay_paths: usize,
}

impl Default for MildSettings {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            steps: 32,
            points: vec![0.0, 0.5, 1.0],
            fractional: FractionalRule::default(),
            weak_paths: 400,
            weak_nx: 64,
            decay_paths: 300,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: "full".into(),
            seed: 20240611,
            run: RunSettings::default(),
            model: ModelConfig::default(),
            coefficient: CoefficientConfig::default(),
            noise: NoiseConfig::default(),
            grid: GridParams::default(),
            fdm: FdmSettings::default(),
            malliavin: MalliavinSettings::default(),
            mild: MildSettings::default(),
        }
    }
}

fn invalid(tag: &str, message: impl Into<String>) -> Error {
    Error::config(tag, message)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid("parse", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("io", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// The experiment without its execution settings.
    pub fn experiment(&self) -> Self {
        Self { run: RunSettings::default(), ..self.clone() }
    }

    /// SHA-256 of the canonical TOML of [`Self::experiment`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.experiment().to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn alpha_params(&self, dim: usize) -> Result<AlphaParams> {
        let m = &self.model;
        match m.alpha {
            Some(a) => AlphaParams::new(dim, m.p, m.q, a),
            None => AlphaParams::midpoint(dim, m.p, m.q),
        }
    }

    /// Every inequality the experiments rely on, each failure carrying its tag.
    pub fn validate(&self) -> Result<()> {
        if !SUITES.contains(&self.suite.as_str()) {
            return Err(invalid("suite", format!("unknown suite {:?}; expected one of {}", self.suite, SUITES.join(", "))));
        }
        let m = &self.model;
        if !(m.lambda >= 1.0 && m.lambda.is_finite()) {
            return Err(invalid("H1", format!("(H1) needs λ ≥ 1, got {}", m.lambda)));
        }
        if !(m.k_a >= 0.0 && m.k_a.is_finite()) {
            return Err(invalid("H2", format!("(H2) needs a finite K_a ≥ 0, got {}", m.k_a)));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(invalid("horizon", format!("T must be positive, got {}", m.horizon)));
        }
        // the stochastic layer is one-dimensional
        self.alpha_params(1)?;
        NoiseField::constant(1.0, self.noise.width, m.noise_decay)?;
        let c = &self.coefficient;
        if c.breakpoints >= c.rough_breakpoints {
            return Err(invalid("coefficient", "rough_breakpoints must exceed breakpoints"));
        }
        for d in [1, 2] {
            self.instances(d)?;
        }
        let nd = self.noise.deterministic_diffusivity;
        if !(1.0 / m.lambda <= nd && nd <= m.lambda) {
            return Err(invalid("H1", format!("(H1) deterministic diffusivity {nd} leaves [1/λ, λ] with λ = {}", m.lambda)));
        }
        self.grid.validate()?;
        FdmConfig::for_field(&CoefficientField::constant_scalar(1, 1.0), m.horizon, self.fdm.h, self.fdm.tau).validate()?;
        let ms = &self.malliavin;
        if ms.paths == 0 || ms.steps < 8 || ms.pieces == 0 || !(ms.bump_eps > 0.0) {
            return Err(invalid("malliavin", format!("invalid Malliavin settings {ms:?}")));
        }
        let k = (ms.bump_time / m.horizon * ms.steps as f64).round();
        if !(ms.bump_time > 0.0 && ms.bump_time < m.horizon) || (k * m.horizon / ms.steps as f64 - ms.bump_time).abs() > 1e-12 {
            return Err(invalid("malliavin", format!("bump time {} must be an interior grid node", ms.bump_time)));
        }
        let mi = &self.mild;
        if mi.n_paths < 2 || mi.weak_paths < 2 || mi.decay_paths < 2 || mi.steps < 4 || mi.weak_nx < 2 || mi.points.is_empty() {
            return Err(invalid("mild", format!("invalid mild-solution settings {mi:?}")));
        }
        if mi.fractional.n_r == 0 || mi.fractional.min_z < 2 || !(mi.fractional.z_density > 0.0 && mi.fractional.z_half_width > 0.0) {
            return Err(invalid("mild", format!("invalid fractional rule {:?}", mi.fractional)));
        }
        Ok(())
    }

    /// Time profile with `n` interior breakpoints on `[0, T]`.
    pub fn profile(&self, breakpoints: usize) -> crate::coeff_fields::TimeProfile<f64> {
        let c = &self.coefficient;
        catalog::alternating_profile(breakpoints + 1, self.model.horizon, c.profile_lo, c.profile_hi)
    }

    /// The spatially varying instance with `breakpoints` jumps in time.
    pub fn field(&self, dim: usize, breakpoints: usize) -> Result<CoefficientField<f64>> {
        match self.coefficient.family {
            CoefficientFamily::Identity => Ok(CoefficientField::constant_scalar(dim, 1.0)),
            CoefficientFamily::ModulatedTanh => catalog::modulated_tanh(dim, self.profile(breakpoints), self.model.k_a, self.model.lambda),
        }
    }

    /// Named shipped instances in dimension `dim`.
    pub fn instances(&self, dim: usize) -> Result<Vec<(String, CoefficientField<f64>)>> {
        let c = &self.coefficient;
        let mut out = vec![(format!("identity-{dim}d"), CoefficientField::constant_scalar(dim, 1.0))];
        if c.family == CoefficientFamily::ModulatedTanh {
            out.push((format!("tanh-{}bp-{dim}d", c.breakpoints), self.field(dim, c.breakpoints)?));
            if dim == 1 {
                out.push((format!("tanh-{}bp-{dim}d", c.rough_breakpoints), self.field(dim, c.rough_breakpoints)?));
            }
        }
        Ok(out)
    }

    pub fn sde(&self) -> SdeSpec {
        match self.coefficient.sde {
            SdeFamily::Generic => SdeSpec::generic(),
            SdeFamily::OrnsteinUhlenbeck => SdeSpec::ornstein_uhlenbeck(1.0, 0.7, 0.0),
        }
    }

    pub fn random_coefficient(&self) -> RandomCoefficient {
        match self.coefficient.random {
            RandomFamily::XIndependent => RandomCoefficient::x_independent(),
            RandomFamily::Mixed => RandomCoefficient::mixed(),
        }
    }

    /// Constant diffusivity: the mild solution is then adapted.
    pub fn deterministic_coefficient(&self) -> RandomCoefficient {
        let factor = ScalarMap::constant(self.noise.deterministic_diffusivity);
        RandomCoefficient { terms: vec![RandomTerm { factor, profile: Profile::One }], lambda: self.model.lambda }
    }

    pub fn stochastic_noise(&self) -> Result<NoiseField> {
        let base = NoiseField::stochastic();
        NoiseField::new(base.amplitude, self.noise.width, self.model.noise_decay)
    }

    pub fn deterministic_noise(&self) -> Result<NoiseField> {
        NoiseField::constant(self.noise.deterministic_amplitude, self.noise.width, self.model.noise_decay)
    }
}
