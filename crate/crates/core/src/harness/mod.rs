//! Configuration, orchestration, the CLI, and ablation sweeps.
//!
//! A [`RunConfig`] is a flat `key = value` file with dotted section keys;
//! command-line flags override file values and every field has a default
//! that runs the bundled micro-corpus end to end.

mod cli;
mod pipeline;
mod sweep;

pub use cli::cli;
pub use pipeline::{end_to_end, EndToEndArtifacts, Manifest};
pub use sweep::{run_sweep, sweep_to_csv, SweepAxis, SweepResult, SweepRow};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalsuite::CheckerMode;
use crate::reward::RewardForm;
use crate::rlloop::PpoConfig;
use crate::tinylm::{DecodeConfig, LossMask, ModelConfig, SftConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Everything a run needs. Defaults execute the bundled micro-corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    pub labels_file: PathBuf,
    pub seeds_file: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub decode: DecodeConfig,
    pub split_ratios: [f64; 3],
    /// Run the obfuscation pass over each pair before dataset assembly.
    pub obfuscate: bool,
    pub rename_variables: bool,
    /// Train the learned reward model before RL (also enabled by `reward.wr > 0`).
    pub train_reward_model: bool,
    pub reward_ws: f64,
    pub reward_wr: f64,
    pub reward_form: RewardForm,
    pub checker_mode: CheckerMode,
    pub compiler_cmd: Option<String>,
    /// Optional augmentation endpoint (offline stubs when absent).
    pub augment_endpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus_dir: crate::fixtures::microcorpus_dir(),
            labels_file: crate::fixtures::microcorpus_labels(),
            seeds_file: crate::fixtures::seed_instructions(),
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            model: ModelConfig::default(),
            sft: SftConfig::default(),
            ppo: PpoConfig::default(),
            decode: DecodeConfig {
                temperature: 0.5,
                top_p: 1.0,
                beam_size: 4,
                max_new_tokens: 160,
            },
            split_ratios: [0.8, 0.1, 0.1],
            obfuscate: true,
            rename_variables: false,
            train_reward_model: false,
            reward_ws: 1.0,
            reward_wr: 0.0,
            reward_form: RewardForm::F1,
            checker_mode: CheckerMode::ParseOnly,
            compiler_cmd: None,
            augment_endpoint: None,
        }
    }
}

impl RunConfig {
    /// Parse a flat `key = value` file with `#` comments.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: idx + 1,
                    text: line.to_string(),
                });
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set one dotted key. Flags funnel through here too, so file and flag
    /// syntax stay identical.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        let bad = |key: &str, value: &str, reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "paths.corpus" => self.corpus_dir = PathBuf::from(value),
            "paths.labels" => self.labels_file = PathBuf::from(value),
            "paths.seeds" => self.seeds_file = PathBuf::from(value),
            "paths.out" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "model.layers" => self.model.n_layers = parse(key, value)?,
            "model.d_model" => self.model.d_model = parse(key, value)?,
            "model.heads" => self.model.n_heads = parse(key, value)?,
            "model.context" => self.model.context_len = parse(key, value)?,
            "sft.lr" => self.sft.lr = parse(key, value)?,
            "sft.batch" => self.sft.batch_size = parse(key, value)?,
            "sft.epochs" => self.sft.epochs = parse(key, value)?,
            "sft.mask" => {
                self.sft.loss_mask = match value {
                    "output_only" => LossMask::OutputOnly,
                    "all" => LossMask::All,
                    _ => return Err(bad(key, value, "expected output_only|all")),
                }
            }
            "ppo.clip" => self.ppo.clip_eps = parse(key, value)?,
            "ppo.beta" => self.ppo.kl_beta = parse(key, value)?,
            "ppo.gamma" => self.ppo.gamma = parse(key, value)?,
            "ppo.lambda" => self.ppo.lambda = parse(key, value)?,
            "ppo.epochs" => self.ppo.epochs_per_batch = parse(key, value)?,
            "ppo.minibatch" => self.ppo.minibatch_size = parse(key, value)?,
            "ppo.lr" => self.ppo.lr = parse(key, value)?,
            "ppo.iterations" => self.ppo.iterations = parse(key, value)?,
            "ppo.value_coef" => self.ppo.value_coef = parse(key, value)?,
            "decode.temperature" => self.decode.temperature = parse(key, value)?,
            "decode.top_p" => self.decode.top_p = parse(key, value)?,
            "decode.beam" => self.decode.beam_size = parse(key, value)?,
            "decode.max_new" => self.decode.max_new_tokens = parse(key, value)?,
            "split.train" => self.split_ratios[0] = parse(key, value)?,
            "split.val" => self.split_ratios[1] = parse(key, value)?,
            "split.test" => self.split_ratios[2] = parse(key, value)?,
            "dataset.obfuscate" => self.obfuscate = parse(key, value)?,
            "dataset.rename_variables" => self.rename_variables = parse(key, value)?,
            "dataset.augment_endpoint" => self.augment_endpoint = Some(value.to_string()),
            "reward.train" => self.train_reward_model = parse(key, value)?,
            "reward.ws" => self.reward_ws = parse(key, value)?,
            "reward.wr" => self.reward_wr = parse(key, value)?,
            "reward.form" => {
                self.reward_form = match value {
                    "f1" => RewardForm::F1,
                    "recall" => RewardForm::Recall,
                    _ => return Err(bad(key, value, "expected f1|recall")),
                }
            }
            "eval.mode" => {
                self.checker_mode = match value {
                    "parse_only" => CheckerMode::ParseOnly,
                    "external_compiler" => CheckerMode::ExternalCompiler,
                    _ => return Err(bad(key, value, "expected parse_only|external_compiler")),
                }
            }
            "eval.compiler_cmd" => self.compiler_cmd = Some(value.to_string()),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
