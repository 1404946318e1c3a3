//! Run configuration, read from TOML.
//!
//! Every section rejects unknown keys; errors carry the dotted key path.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, DEFAULT_BRIDGE_RATE};
use crate::engine::{UnlearnConfig, Variant};
use crate::error::{Result, UnlearnError};
use crate::hierarchy::{CoefficientTable, DEFAULT_FIM_CUTOFFS};
use crate::model::{FitConfig, ModelConfig};
use crate::privacy::PrivacyParams;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub n_subjects: usize,
    pub n_examples: usize,
    pub level_mix: [f64; 4],
    pub bridge_rate: [f64; 4],
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            n_subjects: 4,
            n_examples: 2000,
            level_mix: [0.3, 0.25, 0.2, 0.25],
            bridge_rate: DEFAULT_BRIDGE_RATE,
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_blocks: 2,
            lora_rank: 4,
            lora_alpha: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnSection {
    pub lambda_forget: f64,
    pub gamma_reg: f64,
    pub eta_lr: f64,
    pub alpha_retain_factor: f64,
    pub epsilon_stab: f64,
    pub token_ratio_cap: f64,
    pub fim_window: usize,
    pub steps_per_block: usize,
    pub epochs: usize,
    pub block_size: usize,
    /// Forget-to-retain ratio `m` of each block.
    pub retain_ratio_m: usize,
    pub divergence_ceiling: Option<f64>,
}

impl Default for UnlearnSection {
    /// Engine defaults, with the step settings used on the desk-scale benchmark.
    fn default() -> Self {
        let u = UnlearnConfig::default();
        Self {
            lambda_forget: u.lambda_forget,
            gamma_reg: u.gamma_reg,
            eta_lr: 0.25,
            alpha_retain_factor: 10.0,
            epsilon_stab: u.epsilon_stab,
            token_ratio_cap: 20.0,
            fim_window: u.fim_window,
            steps_per_block: u.steps_per_block,
            epochs: 3,
            block_size: 8,
            retain_ratio_m: 1,
            divergence_ceiling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySection {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    /// Defaults to `block_size / |forget train|`.
    pub sampling_rate_q: Option<f64>,
    pub clip_norm: f64,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 4.0,
            delta: 1e-5,
            sampling_rate_q: None,
            clip_norm: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySection {
    pub fim_cutoffs: [f64; 3],
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
}

impl Default for HierarchySection {
    fn default() -> Self {
        let c = CoefficientTable::default();
        Self {
            fim_cutoffs: DEFAULT_FIM_CUTOFFS,
            alpha: c.alpha,
            beta: c.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub unlearn: UnlearnSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub hierarchy: HierarchySection,
}

fn default_seeds() -> Vec<u64> {
    vec![42, 123, 789]
}

fn default_variant() -> String {
    "full".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            variant: default_variant(),
            out_dir: None,
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            fit: FitConfig::default(),
            unlearn: UnlearnSection::default(),
            privacy: PrivacySection::default(),
            hierarchy: HierarchySection::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| UnlearnError::Parse(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| UnlearnError::Parse(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(UnlearnError::Parse(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(UnlearnError::Parse("seeds: at least one seed is required".into()));
        }
        self.variant_kind()?;
        self.model_config().validate()?;
        self.unlearn_config()?.validate()?;
        if self.unlearn.block_size == 0 || self.unlearn.retain_ratio_m == 0 {
            return Err(UnlearnError::Parse("unlearn: block_size and retain_ratio_m must be at least 1".into()));
        }
        if self.fit.batch_size == 0 {
            return Err(UnlearnError::Parse("fit.batch_size: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn variant_kind(&self) -> Result<Variant> {
        self.variant
            .parse()
            .map_err(|_| UnlearnError::Parse(format!("variant: unknown variant {:?}", self.variant)))
    }

    pub fn corpus_spec(&self, seed: u64) -> CorpusSpec {
        CorpusSpec {
            vocab_size: self.corpus.vocab_size,
            n_subjects: self.corpus.n_subjects,
            n_examples: self.corpus.n_examples,
            level_mix: self.corpus.level_mix,
            bridge_rate: self.corpus.bridge_rate,
            seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.corpus.vocab_size,
            d_model: self.model.d_model,
            n_blocks: self.model.n_blocks,
            lora_rank: self.model.lora_rank,
            lora_alpha: self.model.lora_alpha,
        }
    }

    pub fn coefficients(&self) -> CoefficientTable {
        CoefficientTable {
            alpha: self.hierarchy.alpha,
            beta: self.hierarchy.beta,
        }
    }

    pub fn unlearn_config(&self) -> Result<UnlearnConfig> {
        let u = &self.unlearn;
        Ok(UnlearnConfig {
            lambda_forget: u.lambda_forget,
            gamma_reg: u.gamma_reg,
            eta_lr: u.eta_lr,
            alpha_retain_factor: u.alpha_retain_factor,
            epsilon_stab: u.epsilon_stab,
            token_ratio_cap: u.token_ratio_cap,
            fim_window: u.fim_window,
            steps_per_block: u.steps_per_block,
            epochs: u.epochs,
            fim_cutoffs: self.hierarchy.fim_cutoffs,
            coefficients: self.coefficients(),
            divergence_ceiling: u.divergence_ceiling,
            variant: self.variant_kind()?,
        })
    }

    /// Privacy parameters for a forget-train set of `n_forget` examples.
    pub fn privacy_params(&self, n_forget: usize) -> Result<PrivacyParams> {
        let p = &self.privacy;
        if !p.enabled {
            return Ok(PrivacyParams::disabled());
        }
        let q = match p.sampling_rate_q {
            Some(q) => q,
            None => (self.unlearn.block_size as f64 / n_forget.max(1) as f64).min(1.0),
        };
        PrivacyParams::new(p.epsilon, p.delta, q, p.clip_norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let c = RunConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_toml("schema_version = 1\n[unlearn]\neta = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unlearn.eta"), "{err}");
        let err = RunConfig::from_toml("schema_version = 1\nwhatever = 2\n").unwrap_err();
        assert!(err.to_string().contains("whatever"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("schema_version = 2\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\nvariant = \"bogus\"\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\nseeds = []\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\n[hierarchy]\nfim_cutoffs = [2.0, 1.0, 3.0]\n").is_err());
        assert!(RunConfig::from_toml("schema_version = [").is_err());
    }

    #[test]
    fn sampling_rate_defaults_to_block_fraction() {
        let c = RunConfig::default();
        let p = c.privacy_params(80).unwrap();
        assert!((p.sampling_rate_q - 0.1).abs() < 1e-15);
        let mut off = c.clone();
        off.privacy.enabled = false;
        assert!(!off.privacy_params(320).unwrap().enabled);
    }
}
