use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use charfactor::inference::DEFAULT_LEVELS;
use charfactor::simlab::PowerMethod;
use charfactor::{EstimationConfig, OmegaSpec, PanelSchema, ThresholdRule, TieRule};
use serde::{Deserialize, Serialize};

/// Number of factors: a fixed count or `auto` for the eigenvalue-ratio rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(KChoice::Auto),
            other => other
                .parse()
                .map(KChoice::Fixed)
                .map_err(|_| format!("expected a factor count or `auto`, got `{other}`")),
        }
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Auto => f.write_str("auto"),
            KChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => s.serialize_str("auto"),
            KChoice::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(KChoice::Fixed(k)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RhoPreset {
    Empirical,
    Simulation,
}

/// Threshold settings: a preset, optionally overridden by `c` and `kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoConfig {
    pub preset: Option<RhoPreset>,
    pub c: Option<f64>,
    pub kappa: Option<f64>,
}

impl RhoConfig {
    pub fn rule(&self, fallback: RhoPreset) -> Result<ThresholdRule> {
        let base = match self.preset.unwrap_or(fallback) {
            RhoPreset::Empirical => ThresholdRule::empirical(),
            RhoPreset::Simulation => ThresholdRule::simulation(),
        };
        let ThresholdRule::Scaled { c, kappa } = base else { unreachable!() };
        let rule = ThresholdRule::Scaled { c: self.c.unwrap_or(c), kappa: self.kappa.unwrap_or(kappa) };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StudyPreset {
    /// Ten replications of a small coverage design and a small power grid.
    #[default]
    Smoke,
    /// Calibrated design at N=300, T=120, L=10, K=2.
    Coverage,
    /// Power grid at N=500, T=200.
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub preset: StudyPreset,
    pub reps: Option<usize>,
    /// Overrides of the coverage design dimensions.
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub l: Option<usize>,
    pub k: Option<usize>,
    pub coverage_levels: Vec<f64>,
    /// Values of `δ₁` for the power grid.
    pub delta_grid: Option<Vec<f64>>,
    pub power_level: f64,
    pub power_methods: Vec<PowerMethod>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            preset: StudyPreset::Smoke,
            reps: None,
            n: None,
            t: None,
            l: None,
            k: None,
            coverage_levels: vec![0.90, 0.95, 0.99],
            delta_grid: None,
            power_level: 0.01,
            power_methods: vec![PowerMethod::Formula],
        }
    }
}

/// Everything a run needs. Read from `--config` (TOML or JSON), then
/// overridden by command-line flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub schema: PanelSchema,
    pub rank_normalize: bool,
    pub tie_rule: TieRule,
    pub k: KChoice,
    pub k_max: Option<usize>,
    pub omega: OmegaSpec,
    pub rho: RhoConfig,
    pub rethreshold: bool,
    pub levels: Vec<f64>,
    /// Multiplier-bootstrap draws; 0 disables the bootstrap.
    pub bootstrap_draws: usize,
    pub seed: u64,
    pub fdr_level: f64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            schema: PanelSchema::default(),
            rank_normalize: false,
            tie_rule: TieRule::default(),
            k: KChoice::Auto,
            k_max: None,
            omega: OmegaSpec::Simple,
            rho: RhoConfig::default(),
            rethreshold: false,
            levels: DEFAULT_LEVELS.to_vec(),
            bootstrap_draws: 0,
            seed: 0,
            fdr_level: 0.05,
            threads: None,
            out: PathBuf::from("."),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            bail!("test level {bad} is not in (0, 1)");
        }
        if !(self.fdr_level > 0.0 && self.fdr_level < 1.0) {
            bail!("fdr level {} is not in (0, 1)", self.fdr_level);
        }
        if self.k == KChoice::Auto && self.k_max.is_some_and(|k| k < 2) {
            bail!("automatic K needs k_max >= 2");
        }
        if self.threads == Some(0) {
            bail!("--threads must be positive");
        }
        Ok(())
    }

    pub fn estimation(&self, fallback: RhoPreset) -> Result<EstimationConfig> {
        Ok(EstimationConfig {
            k: match self.k {
                KChoice::Auto => None,
                KChoice::Fixed(k) => Some(k),
            },
            k_max: self.k_max,
            omega: self.omega,
            threshold: self.rho.rule(fallback)?,
            rethreshold: self.rethreshold,
        })
    }
}
