//! Experiment configuration file (TOML).
//!
//! ```toml
//! version = 1
//! seed = 0
//!
//! [model]        # layers, heads, d_model, d_ff, max_len, block_size
//! [data]         # kind = "markov" | "text"
//! [schedule]     # kind, beta, omega
//! [schedule.grid]
//! [train]        # TrainConfig; block size and schedule come from the sections above
//! [sampler]      # SamplerConfig
//! ```
//!
//! The environment variable `BD3_SEED` overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_documents, wrap_corpus, MarkovSource, Specials, Vocabulary};
use crate::denoiser::DenoiserConfig;
use crate::error::{Bd3Error, Result};
use crate::rng::SplitRng;
use crate::sampling::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::training::{GridConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "BD3_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub block_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            layers: d.layers,
            heads: d.heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_len: d.max_len,
            block_size: d.block_size,
        }
    }
}

impl ModelSection {
    pub fn denoiser(&self, vocab_size: usize) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            block_size: self.block_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Sequences of `model.max_len` symbols drawn from a random Markov source.
    Markov {
        #[serde(default = "one")]
        order: usize,
        #[serde(default = "five")]
        symbols: usize,
        /// Sharpness of the random transition rows.
        #[serde(default = "onef")]
        sharpness: f64,
        #[serde(default)]
        source_seed: u64,
        #[serde(default = "train_count")]
        train_sequences: usize,
        #[serde(default = "val_count")]
        val_sequences: usize,
    },
    /// Character-level corpus wrapped into `model.max_len` chunks.
    Text {
        train: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
        /// One document per line instead of per file.
        #[serde(default)]
        per_line: bool,
        /// Symbol file; built from the training text when absent.
        #[serde(default)]
        vocab: Option<PathBuf>,
        #[serde(default)]
        add_bos: bool,
        #[serde(default)]
        add_eos: bool,
        /// Held-out share of training chunks when `val` is absent.
        #[serde(default = "val_fraction")]
        val_fraction: f64,
    },
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn onef() -> f64 {
    1.0
}
fn train_count() -> usize {
    512
}
fn val_count() -> usize {
    64
}
fn val_fraction() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Markov {
            order: 1,
            symbols: 5,
            sharpness: 1.0,
            source_seed: 0,
            train_sequences: train_count(),
            val_sequences: val_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    #[serde(flatten)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub grid: GridConfig,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::Linear,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataConfig,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            model: ModelSection::default(),
            data: DataConfig::default(),
            schedule: ScheduleSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Tokenized corpus plus whatever describes its symbols.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    /// Includes the mask id.
    pub vocab_size: usize,
    pub vocabulary: Vocabulary,
    /// Present for synthetic data.
    pub source: Option<MarkovSource>,
}

impl ExperimentConfig {
    /// Parses `text`, applies `BD3_SEED` and propagates the seed.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e: toml::de::Error| Bd3Error::config(e.to_string()))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Bd3Error::config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Bd3Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Bd3Error::config(e.to_string()))
    }

    /// Copies the shared fields into the subsections and validates.
    pub fn resolve(&mut self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Bd3Error::config(format!(
                "config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.train.block_size = self.model.block_size;
        self.train.schedule = self.schedule.schedule;
        self.train.grid = self.schedule.grid.clone();
        self.schedule.schedule.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.model.denoiser(2).validate()
    }

    pub fn prepare_data(&self, base: &Path) -> Result<PreparedData> {
        let len = self.model.max_len;
        match &self.data {
            &DataConfig::Markov {
                order,
                symbols,
                sharpness,
                source_seed,
                train_sequences,
                val_sequences,
            } => {
                let mut rng = SplitRng::new(source_seed);
                let source = MarkovSource::random(order, symbols, sharpness, &mut rng)?;
                let mut draw = |n: usize| (0..n).map(|_| source.sample(len, &mut rng)).collect::<Vec<_>>();
                let train = draw(train_sequences);
                let val = draw(val_sequences);
                Ok(PreparedData {
                    train,
                    val,
                    vocab_size: symbols + 1,
                    vocabulary: Vocabulary::synthetic(symbols)?,
                    source: Some(source),
                })
            }
            DataConfig::Text {
                train,
                val,
                per_line,
                vocab,
                add_bos,
                add_eos,
                val_fraction,
            } => {
                let train_docs = load_documents(&base.join(train), *per_line)?;
                if train_docs.is_empty() {
                    return Err(Bd3Error::Data(format!("no documents under {}", train.display())));
                }
                let vocabulary = match vocab {
                    Some(p) => Vocabulary::load(&base.join(p))?,
                    None => Vocabulary::from_text(
                        &train_docs.concat(),
                        Specials {
                            bos: *add_bos,
                            eos: *add_eos,
                            unk: true,
                        },
                    )?,
                };
                let tokenize = |docs: &[String]| -> Result<Vec<Vec<usize>>> {
                    let ids = docs
                        .iter()
                        .map(|d| vocabulary.tokenize_chars(d, *add_bos, *add_eos))
                        .collect::<Result<Vec<_>>>()?;
                    wrap_corpus(&ids, len)
                };
                let mut train_chunks = tokenize(&train_docs)?;
                let val_chunks = match val {
                    Some(p) => tokenize(&load_documents(&base.join(p), *per_line)?)?,
                    None => {
                        if !(0.0..1.0).contains(val_fraction) {
                            return Err(Bd3Error::config("val_fraction must lie in [0, 1)"));
                        }
                        let k = (train_chunks.len() as f64 * val_fraction).ceil() as usize;
                        train_chunks.split_off(train_chunks.len().saturating_sub(k))
                    }
                };
                if train_chunks.is_empty() || val_chunks.is_empty() {
                    return Err(Bd3Error::Data(format!("corpus too short for chunks of {len} tokens")));
                }
                Ok(PreparedData {
                    train: train_chunks,
                    val: val_chunks,
                    vocab_size: vocabulary.size(),
                    vocabulary,
                    source: None,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let mut back: ExperimentConfig = toml::from_str(&text).unwrap();
        back.resolve().unwrap();
        let mut cfg = cfg;
        cfg.resolve().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_feed_the_train_config() {
        let text = r#"
            seed = 7
            [model]
            max_len = 16
            block_size = 8
            [schedule]
            kind = "clipped"
            beta = 0.3
            omega = 0.8
            [schedule.grid]
            betas = [0.1]
            omegas = [0.9]
            [train]
            steps = 3
        "#;
        let cfg: ExperimentConfig = {
            let mut c: ExperimentConfig = toml::from_str(text).unwrap();
            c.resolve().unwrap();
            c
        };
        assert_eq!(cfg.train.block_size, 8);
        assert_eq!(cfg.train.schedule, NoiseSchedule::Clipped { beta: 0.3, omega: 0.8 });
        assert_eq!(cfg.train.grid.betas, vec![0.1]);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.sampler.seed, 7);
        assert_eq!(cfg.train.steps, 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "version = 2",
            "[model]\nmax_len = 10\nblock_size = 4",
            "[schedule]\nkind = \"clipped\"\nbeta = 0.9\nomega = 0.2",
            "[sampler]\nnucleus = 1.5",
            "[train]\nbogus = 1",
            "[data]\nkind = \"json\"",
        ] {
            let parsed: std::result::Result<ExperimentConfig, _> = toml::from_str(text);
            let bad = match parsed {
                Ok(mut c) => c.resolve().is_err(),
                Err(_) => true,
            };
            assert!(bad, "accepted {text:?}");
        }
    }

    #[test]
    fn markov_data_has_the_context_length() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.max_len = 8;
        cfg.data = DataConfig::Markov {
            order: 1,
            symbols: 3,
            sharpness: 1.0,
            source_seed: 1,
            train_sequences: 4,
            val_sequences: 2,
        };
        let d = cfg.prepare_data(Path::new(".")).unwrap();
        assert_eq!(d.vocab_size, 4);
        assert_eq!(d.train.len(), 4);
        assert!(d.train.iter().chain(&d.val).all(|s| s.len() == 8 && s.iter().all(|&t| t < 3)));
        assert!(d.source.is_some());
    }

    #[test]
    fn text_data_is_wrapped_and_split() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("corpus.txt"), "abcabcabcabc\nbcabcabca\n").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.model.max_len = 4;
        cfg.model.block_size = 2;
        cfg.data = DataConfig::Text {
            train: "corpus.txt".into(),
            val: None,
            per_line: true,
            vocab: None,
            add_bos: false,
            add_eos: true,
            val_fraction: 0.25,
        };
        let d = cfg.prepare_data(dir.path()).unwrap();
        // 12 + 9 characters plus two EOS = 23 tokens = 5 chunks of 4
        assert_eq!(d.train.len() + d.val.len(), 5);
        assert_eq!(d.val.len(), 2);
        assert_eq!(d.vocab_size, d.vocabulary.size());
        assert!(d.source.is_none());
    }
}
