//! Declarative run description: one JSON document covering data synthesis,
//! the missingness protocol, and the model/optimizer. Unknown keys are
//! rejected; every default is materialized into run_meta.json so a run is
//! self-describing.

use crate::error::{Error, Result};
use crate::gating::GateKind;
use crate::synth::{Protocol, SynthSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Token-level vs expert-level application of confidence weights.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TokenLevel,
    ExpertLevel,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::TokenLevel => "token_level",
            Variant::ExpertLevel => "expert_level",
        }
    }
}

/// Imputation switches: the module-dropout ablation axis.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    /// Missing modalities stay all-zero.
    Off,
    /// Pre-imputation only.
    PreOnly,
    /// Pre-imputation plus sparse cross-attention refinement.
    Full,
}

impl ImputeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImputeMode::Off => "off",
            ImputeMode::PreOnly => "pre_only",
            ImputeMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gate: GateKind,
    pub variant: Variant,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub sparsity_b: usize,
    pub pre_impute_samples: usize,
    pub impute: ImputeMode,
    pub conf_loss_weight: f64,
    pub lb_loss_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub distance_temperature: f64,
    pub seed: Option<u64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gate: GateKind::ConfNet,
            variant: Variant::TokenLevel,
            num_experts: 8,
            top_k: 2,
            hidden_dim: 32,
            sparsity_b: 4,
            pre_impute_samples: 10,
            impute: ImputeMode::Full,
            conf_loss_weight: 1.0,
            lb_loss_weight: 0.01,
            learning_rate: 3e-4,
            epochs: 50,
            batch_size: 64,
            dropout_rate: 0.1,
            distance_temperature: 1.0,
            seed: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= K <= N, got K={}, N={}",
                self.top_k, self.num_experts
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.sparsity_b == 0 {
            return Err(Error::Config("sparsity_b must be >= 1".into()));
        }
        if self.pre_impute_samples == 0 {
            return Err(Error::Config("pre_impute_samples must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if self.distance_temperature <= 0.0 {
            return Err(Error::Config("distance_temperature must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.conf_loss_weight < 0.0 || self.lb_loss_weight < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthSpec,
    pub protocol: Protocol,
    pub model: ModelConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthSpec::default(),
            protocol: Protocol::default(),
            model: ModelConfig::default(),
            output_dir: None,
        }
    }
}

pub const ENV_SEED: &str = "CONFMOE_SEED";
pub const DEFAULT_SEED: u64 = 2023;

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.protocol.validate(self.synth.num_modalities)?;
        self.model.validate()?;
        Ok(())
    }

    /// Fills in seeds and output directory. Priority: explicit flag, then
    /// the config file, then the CONFMOE_SEED environment variable, then
    /// 2023.
    pub fn resolve(
        mut self,
        seed_flag: Option<u64>,
        out_flag: Option<PathBuf>,
        env_seed: Option<u64>,
    ) -> ResolvedConfig {
        let fallback = env_seed.unwrap_or(DEFAULT_SEED);
        let seed = seed_flag.unwrap_or_else(|| {
            self.model
                .seed
                .or(self.synth.seed)
                .unwrap_or(fallback)
        });
        if seed_flag.is_some() {
            self.synth.seed = Some(seed);
            self.model.seed = Some(seed);
        } else {
            self.synth.seed = Some(self.synth.seed.unwrap_or(seed));
            self.model.seed = Some(self.model.seed.unwrap_or(seed));
        }
        let output_dir = out_flag
            .or(self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("confsmoe-run"));
        self.output_dir = Some(output_dir.clone());
        ResolvedConfig {
            config: self,
            output_dir,
        }
    }
}

/// A config with all defaults and seeds materialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    #[serde(flatten)]
    pub config: ExperimentConfig,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn model_seed(&self) -> u64 {
        self.config.model.seed.expect("resolved")
    }

    pub fn synth_seed(&self) -> u64 {
        self.config.synth.seed.expect("resolved")
    }
}

pub fn env_seed() -> Option<u64> {
    std::env::var(ENV_SEED).ok().and_then(|s| s.parse().ok())
}
