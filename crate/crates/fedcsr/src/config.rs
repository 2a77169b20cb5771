//! Experiment configuration: strict TOML, one file per experiment.
//!
//! Four sections mirror the moving parts: `[federation]` for the round
//! protocol and optimizer, `[dataset]` for the synthetic corpus and cuer
//! population, `[model]` for dimensions, `[run]` for seeds and output.
//! Parsing is strict (unknown keys rejected) and parse -> serialize ->
//! parse is a fixed point, so a config file is a complete, diffable record
//! of an experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{build_inventory, generate_corpus, make_split, CuerProfile, DatasetSplit};
use crate::eval::DecodeHead;
use crate::fed::{Method, RoundConfig};
use crate::nn::ModelConfig;
use crate::rng::derive_seed;

/// The round protocol and optimizer knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub method: Method,
    pub decode_head: DecodeHead,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub freeze_phi_locally: bool,
    pub gamma_trains_phi: bool,
    pub skip_global_train: bool,
    pub weighted_mean: bool,
    pub record_wall_time: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        let r = RoundConfig::default();
        FederationSection {
            rounds: r.rounds,
            local_epochs: r.local_epochs,
            global_epochs: r.global_epochs,
            batch_size: r.batch_size,
            local_lr: r.local_lr,
            global_lr: r.global_lr,
            alpha: r.alpha,
            beta: r.beta,
            gamma: r.gamma,
            mu: r.mu,
            method: r.method,
            decode_head: r.decode_head,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_eps: r.adam_eps,
            freeze_phi_locally: r.freeze_phi_locally,
            gamma_trains_phi: r.gamma_trains_phi,
            skip_global_train: r.skip_global_train,
            weighted_mean: r.weighted_mean,
            record_wall_time: r.record_wall_time,
        }
    }
}

/// The synthetic corpus and cuer population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub cuers: usize,
    pub sentences: usize,
    pub sentence_len: [usize; 2],
    pub word_len: [usize; 2],
    pub sigma: f64,
    pub offset_scale: f64,
    pub hand_lags: Vec<usize>,
    pub train_ratio: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            cuers: 4,
            sentences: 200,
            sentence_len: [4, 10],
            word_len: [1, 3],
            sigma: 0.05,
            offset_scale: 0.5,
            hand_lags: vec![0, 1, 2],
            train_ratio: 0.8,
        }
    }
}

/// Seeds, output location, and the thread cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: String,
    /// 0 leaves the global thread pool at its default size.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![1, 2, 3],
            out: "runs".into(),
            threads: 0,
        }
    }
}

/// A whole experiment file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationSection,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub run: RunSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("read: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    /// Parses and validates a config from TOML text.
    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.round_config(1).validate()?;
        self.model.validate()?;
        let d = &self.dataset;
        if d.cuers == 0 {
            return Err("dataset.cuers must be at least 1".into());
        }
        if d.sentences < 2 {
            return Err("dataset.sentences must be at least 2".into());
        }
        if d.sentence_len[0] == 0 || d.sentence_len[0] > d.sentence_len[1] {
            return Err("dataset.sentence_len must be a non-empty ascending range".into());
        }
        if d.word_len[0] == 0 || d.word_len[0] > d.word_len[1] {
            return Err("dataset.word_len must be a non-empty ascending range".into());
        }
        if !d.sigma.is_finite() || d.sigma < 0.0 {
            return Err("dataset.sigma must be finite and non-negative".into());
        }
        if !d.offset_scale.is_finite() || d.offset_scale < 0.0 {
            return Err("dataset.offset_scale must be finite and non-negative".into());
        }
        if d.hand_lags.is_empty() {
            return Err("dataset.hand_lags must not be empty".into());
        }
        if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
            return Err("dataset.train_ratio must be inside (0, 1)".into());
        }
        if self.run.seeds.is_empty() {
            return Err("run.seeds must not be empty".into());
        }
        Ok(())
    }

    /// The per-run view of the federation section for one seed.
    pub fn round_config(&self, seed: u64) -> RoundConfig {
        let f = &self.federation;
        RoundConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            global_epochs: f.global_epochs,
            batch_size: f.batch_size,
            local_lr: f.local_lr,
            global_lr: f.global_lr,
            alpha: f.alpha,
            beta: f.beta,
            gamma: f.gamma,
            mu: f.mu,
            method: f.method,
            seed,
            decode_head: f.decode_head,
            adam_beta1: f.adam_beta1,
            adam_beta2: f.adam_beta2,
            adam_eps: f.adam_eps,
            freeze_phi_locally: f.freeze_phi_locally,
            gamma_trains_phi: f.gamma_trains_phi,
            skip_global_train: f.skip_global_train,
            weighted_mean: f.weighted_mean,
            record_wall_time: f.record_wall_time,
        }
    }

    /// Builds the full dataset for one seed: inventory, cuers, corpus, split.
    pub fn build_split(&self, seed: u64) -> DatasetSplit {
        let d = &self.dataset;
        let inventory = build_inventory(derive_seed(seed, &[11]));
        let cuers = CuerProfile::generate(
            d.cuers,
            d.offset_scale,
            d.sigma,
            &d.hand_lags,
            derive_seed(seed, &[12]),
        );
        let corpus = generate_corpus(
            d.sentences,
            (d.sentence_len[0], d.sentence_len[1]),
            (d.word_len[0], d.word_len[1]),
            derive_seed(seed, &[13]),
        );
        make_split(
            &corpus,
            &cuers,
            &inventory,
            d.train_ratio,
            derive_seed(seed, &[14]),
        )
    }
}
