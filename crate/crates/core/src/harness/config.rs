use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{Encoder, ExternalEncoder, HashedNgramEncoder, DEFAULT_DIM};
use crate::error::{Error, Result};
use crate::mask_trainer::TrainingConfig;
use crate::model::{BaseTrainConfig, Granularity, ModelConfig};

use super::corpus::{CorpusSpec, Document};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    Synthetic(CorpusSpec),
    /// Text files or directories of `.txt` files.
    Paths(Vec<PathBuf>),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(CorpusSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EncoderChoice {
    HashedNgramTfidf {
        dim: usize,
        hash_seed: u64,
    },
    /// Precomputed embeddings keyed by document id.
    ExternalFile {
        path: PathBuf,
    },
}

impl Default for EncoderChoice {
    fn default() -> Self {
        EncoderChoice::HashedNgramTfidf {
            dim: DEFAULT_DIM,
            hash_seed: 0,
        }
    }
}

impl EncoderChoice {
    /// Builds the encoder, fitting IDF weights on `docs` where applicable.
    pub fn build(&self, docs: &[Document]) -> Result<Encoder> {
        match self {
            EncoderChoice::HashedNgramTfidf { dim, hash_seed } => {
                if *dim == 0 {
                    return Err(Error::Config("encoder dim must be positive".into()));
                }
                let mut enc = HashedNgramEncoder::new(*dim, *hash_seed);
                let texts: Vec<&[u8]> = docs.iter().map(|d| d.text.as_bytes()).collect();
                enc.fit_idf(&texts);
                Ok(Encoder::Hashed(enc))
            }
            EncoderChoice::ExternalFile { path } => {
                Ok(Encoder::External(ExternalEncoder::load(path)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineToggles {
    pub sleb: bool,
    pub oneshot_ppl: bool,
    pub evopress: bool,
    pub evopress_generations: usize,
    pub evopress_population: usize,
}

impl Default for BaselineToggles {
    fn default() -> Self {
        Self {
            sleb: true,
            oneshot_ppl: true,
            evopress: true,
            evopress_generations: 20,
            evopress_population: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskOptions {
    /// JSON-lines tasks file; when absent tasks are cut from held-out text.
    pub path: Option<PathBuf>,
    pub synthetic_count: usize,
    pub prompt_len: usize,
    pub choice_len: usize,
    pub num_choices: usize,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            path: None,
            synthetic_count: 64,
            prompt_len: 48,
            choice_len: 16,
            num_choices: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Its `granularity` is replaced by the top-level one.
    pub model: ModelConfig,
    pub granularity: Granularity,
    pub corpus: CorpusSource,
    /// Skip base training and load this checkpoint.
    pub base_checkpoint: Option<PathBuf>,
    pub base_training: BaseTrainConfig,
    pub encoder: EncoderChoice,
    pub cluster_counts: Vec<usize>,
    pub sparsities: Vec<f32>,
    pub seeds: Vec<u64>,
    pub mask_training: TrainingConfig,
    pub calib_per_cluster: usize,
    /// Fraction of documents held out for evaluation, drawn before clustering.
    pub holdout_fraction: f64,
    /// Calibration documents given to the static baselines.
    pub baseline_calib_docs: usize,
    pub baselines: BaselineToggles,
    pub tasks: TaskOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            granularity: Granularity::Block,
            corpus: CorpusSource::default(),
            base_checkpoint: None,
            base_training: BaseTrainConfig::default(),
            encoder: EncoderChoice::default(),
            cluster_counts: vec![1, 4],
            sparsities: vec![0.25],
            seeds: vec![0, 1, 2],
            mask_training: TrainingConfig::default(),
            calib_per_cluster: 1000,
            holdout_fraction: 0.1,
            baseline_calib_docs: 64,
            baselines: BaselineToggles::default(),
            tasks: TaskOptions::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn check_exists(p: &Path, what: &str) -> Result<()> {
    if !p.exists() {
        return Err(Error::Config(format!("{what} {p:?} does not exist")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model.with_granularity(self.granularity)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model_config().validate()?;
        self.mask_training.validate()?;
        if self.cluster_counts.is_empty() || self.cluster_counts.contains(&0) {
            return Err(Error::Config(
                "cluster_counts must be non-empty and ≥ 1".into(),
            ));
        }
        if self.sparsities.is_empty() || self.sparsities.iter().any(|s| !(0.0..1.0).contains(s)) {
            return Err(Error::Config(
                "sparsities must be non-empty and in [0, 1)".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
        }
        if self.calib_per_cluster == 0 {
            return Err(Error::Config("calib_per_cluster must be positive".into()));
        }
        if self.model.vocab_size < crate::model::tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "byte tokenizer needs vocab_size ≥ {}",
                crate::model::tokenizer::VOCAB_SIZE
            )));
        }
        if let CorpusSource::Paths(paths) = &self.corpus {
            if paths.is_empty() {
                return Err(Error::Config("corpus paths are empty".into()));
            }
            for p in paths {
                check_exists(p, "corpus path")?;
            }
        }
        if let Some(p) = &self.base_checkpoint {
            check_exists(p, "base checkpoint")?;
        }
        if let EncoderChoice::ExternalFile { path } = &self.encoder {
            check_exists(path, "embedding file")?;
        }
        if let Some(p) = &self.tasks.path {
            check_exists(p, "tasks file")?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
