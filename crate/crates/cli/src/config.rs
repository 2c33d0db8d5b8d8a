//! Run configuration: a sectioned TOML file whose values command-line flags
//! may override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use evidal_core::active::{ALConfig, AnnealMode, QueryStrategy};
use evidal_core::network::{EvidenceActivation, NetworkConfig, TrainHyper};
use evidal_core::pipeline::{AugmentationConfig, Domain, PretrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; when absent the preset is generated in memory.
    pub dataset: Option<PathBuf>,
    pub preset: String,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: None, preset: "nct-toy".into(), seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Contrastive pre-training before the first fine-tune.
    pub pretrain: bool,
    pub domain: Domain,
    pub temperature: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub feature_dropout_prob: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let a = AugmentationConfig::default();
        Self {
            pretrain: false,
            domain: p.domain,
            temperature: p.temperature,
            epochs: p.epochs,
            batch_size: p.batch_size,
            noise_sigma: a.noise_sigma,
            feature_dropout_prob: a.feature_dropout_prob,
        }
    }
}

impl PipelineConfig {
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig { temperature: self.temperature, epochs: self.epochs, batch_size: self.batch_size, domain: self.domain }
    }

    pub fn augmentation(&self, seed: u64) -> AugmentationConfig {
        AugmentationConfig { noise_sigma: self.noise_sigma, feature_dropout_prob: self.feature_dropout_prob, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub evidence_activation: EvidenceActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = NetworkConfig::toy(1, 2, 0);
        Self {
            hidden_dims: t.hidden_dims,
            embedding_dim: t.embedding_dim,
            projection_dim: t.projection_dim,
            evidence_activation: t.evidence_activation,
        }
    }
}

impl ModelConfig {
    pub fn network(&self, input_dim: usize, num_classes: usize, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            projection_dim: self.projection_dim,
            num_classes,
            evidence_activation: self.evidence_activation,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    pub strategies: Vec<QueryStrategy>,
    pub seeds: Vec<u64>,
    pub budget_fraction_per_round: f64,
    pub max_budget_fraction: f64,
    pub epochs_per_round: u32,
    pub warm_start: bool,
    pub anneal_mode: AnnealMode,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        let a = ALConfig::default();
        Self {
            strategies: vec![QueryStrategy::UncertaintyTopk, QueryStrategy::Random],
            seeds: (0..5).collect(),
            budget_fraction_per_round: a.budget_fraction_per_round,
            max_budget_fraction: a.max_budget_fraction,
            epochs_per_round: a.epochs_per_round,
            warm_start: a.warm_start,
            anneal_mode: a.anneal_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: u32,
    /// Student epochs after fine-tuning; 0 skips distillation.
    pub distill_epochs: u32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 50, distill_epochs: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub optimizer: TrainHyper,
    pub active: ActiveConfig,
    pub finetune: FinetuneConfig,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn al_config(&self, strategy: QueryStrategy, seed: u64) -> ALConfig {
        ALConfig {
            budget_fraction_per_round: self.active.budget_fraction_per_round,
            max_budget_fraction: self.active.max_budget_fraction,
            strategy,
            epochs_per_round: self.active.epochs_per_round,
            hyper: self.optimizer,
            warm_start: self.active.warm_start,
            anneal_mode: self.active.anneal_mode,
            seed,
        }
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.active.seeds.is_empty() {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        if self.active.strategies.is_empty() {
            return Err(CliError::Usage("at least one strategy is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.active.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CliError::Usage(format!("seed {s} listed twice")));
        }
        if let Some(p) = &self.data.dataset {
            if !p.exists() {
                return Err(CliError::Usage(format!("dataset {} does not exist", p.display())));
            }
        }
        self.al_config(self.active.strategies[0], 0).validate()?;
        self.model.network(1, 2, 0).validate()?;
        Ok(())
    }
}
