//! Experiment configuration (TOML).
//!
//! ```toml
//! config_version = 1
//! m = 7
//! t = 2
//! delta = 0.05
//! n = 10000            # or: q_target = 0.999 (auto-sizing)
//! sizing = "conservative"
//! epsilon = 0.0
//! trials = 100
//! master_seed = 1
//!
//! [adversary]
//! name = "equivocator"
//! angle = 1.5707963
//! faulty = [0, 1]
//!
//! [output]
//! dir = "out"
//! transcript = false
//!
//! [acceptance]
//! max_violation_rate = 0.01
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversaries::{faulty_mask, AdversaryError, AdversarySpec, HONEST_SHADOW};
use crate::quantum_link::{required_qubits, ChannelParams, LinkError};
use crate::rf_protocols::{ParamError, ProtocolParams};
use crate::NodeId;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config_version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("give exactly one of n and q_target")]
    Sizing,
    #[error("q_target must lie in (0, 1), got {0}")]
    Target(f64),
    #[error("trials must be at least 1")]
    Trials,
    #[error("max_violation_rate must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Channel(#[from] LinkError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

/// How many link uses a run-level `q_target` is spread over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sizing {
    /// `m²` links, as in the single-shot guarantee.
    Theorem,
    /// `m²·(t+1)` links, one full exchange per king phase.
    #[default]
    Conservative,
}

impl Sizing {
    pub fn exponent(self, m: usize, t: usize) -> u64 {
        let links = (m * m) as u64;
        match self {
            Sizing::Theorem => links,
            Sizing::Conservative => links * (t as u64 + 1),
        }
    }
}

/// Smallest per-link `n` such that `q_succ^exponent ≥ q_target`.
pub fn auto_size(delta: f64, q_target: f64, exponent: u64) -> u64 {
    let per_link = (q_target.ln() / exponent as f64).exp();
    required_qubits(delta, per_link)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    /// Faulty node ids; defaults to `0..t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faulty: Option<Vec<NodeId>>,
}

impl AdversaryConfig {
    pub fn spec(&self) -> AdversarySpec {
        AdversarySpec { name: self.name.clone(), angle: self.angle, shift: self.shift }
    }
}

impl From<AdversarySpec> for AdversaryConfig {
    fn from(spec: AdversarySpec) -> Self {
        AdversaryConfig { name: spec.name, angle: spec.angle, shift: spec.shift, faulty: None }
    }
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversarySpec::named(HONEST_SHADOW).into()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub transcript: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptanceConfig {
    /// Defaults to `(1 − bound) + 3σ` over the configured trial count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_violation_rate: Option<f64>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_trials() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub config_version: u32,
    pub m: usize,
    pub t: usize,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_target: Option<f64>,
    #[serde(default)]
    pub sizing: Sizing,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub acceptance: AcceptanceConfig,
}

impl ExperimentConfig {
    /// Minimal config with fixed `n`.
    pub fn new(m: usize, t: usize, delta: f64, n: u64) -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            m,
            t,
            delta,
            n: Some(n),
            q_target: None,
            sizing: Sizing::default(),
            epsilon: 0.0,
            trials: 1,
            master_seed: 0,
            adversary: AdversaryConfig::default(),
            output: OutputConfig::default(),
            acceptance: AcceptanceConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Validates everything and fixes `n`. Runs before any trial.
    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.config_version));
        }
        if self.trials == 0 {
            return Err(ConfigError::Trials);
        }
        // checks t < m/3 and delta before sizing uses them
        ProtocolParams::new(self.m, self.t, self.delta, ChannelParams::noiseless(1)?)?;
        let n = match (self.n, self.q_target) {
            (Some(n), None) => n,
            (None, Some(q)) if q > 0.0 && q < 1.0 => {
                auto_size(self.delta, q, self.sizing.exponent(self.m, self.t))
            }
            (None, Some(q)) => return Err(ConfigError::Target(q)),
            _ => return Err(ConfigError::Sizing),
        };
        let params = ProtocolParams::new(self.m, self.t, self.delta, ChannelParams::new(self.epsilon, n)?)?;
        let faulty = faulty_mask(self.m, self.t, self.adversary.faulty.as_deref())?;
        let adversary = self.adversary.spec();
        adversary.build()?;
        if let Some(r) = self.acceptance.max_violation_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(ConfigError::Threshold(r));
            }
        }
        Ok(Experiment {
            params,
            adversary,
            faulty,
            trials: self.trials,
            master_seed: self.master_seed,
            max_violation_rate: self.acceptance.max_violation_rate,
            transcript: self.output.transcript,
        })
    }
}

/// A validated experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub params: ProtocolParams,
    pub adversary: AdversarySpec,
    pub faulty: Vec<bool>,
    pub trials: u64,
    pub master_seed: u64,
    pub max_violation_rate: Option<f64>,
    pub transcript: bool,
}

impl Experiment {
    /// Allowed violation frequency: the configured one, or the complement
    /// of the per-run bound plus three binomial standard deviations.
    pub fn allowed_violation_rate(&self) -> f64 {
        self.max_violation_rate.unwrap_or_else(|| {
            let p = 1.0 - self.params.run_success_bound();
            (p + 3.0 * (p * (1.0 - p) / self.trials as f64).sqrt()).min(1.0)
        })
    }
}
