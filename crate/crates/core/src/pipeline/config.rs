use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{TrainHyper, TransformerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub general: PathBuf,
    pub in_domain_train: PathBuf,
    pub in_domain_dev: PathBuf,
    pub in_domain_test: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub num_merges: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { num_merges: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralSection {
    /// `vocab_size` is taken from the tokenizer.
    pub model: TransformerConfig,
    pub pretrain: TrainHyper,
    pub finetune: TrainHyper,
    /// Also train an in-domain model from random initialization.
    pub train_scratch: bool,
}

impl Default for NeuralSection {
    fn default() -> Self {
        Self {
            model: TransformerConfig::default(),
            pretrain: TrainHyper::default(),
            finetune: TrainHyper {
                learning_rate: 3e-4,
                ..TrainHyper::default()
            },
            train_scratch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefixSection {
    pub k_values: Vec<usize>,
    pub max_per_k: usize,
}

impl Default for PrefixSection {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3, 4],
            max_per_k: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    /// One generation pass per temperature; the outputs are concatenated.
    pub temperatures: Vec<f64>,
    pub samples_per_prefix: usize,
    pub keep_top: usize,
    pub length_penalty: f64,
    pub max_new_tokens: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            temperatures: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5],
            samples_per_prefix: 25,
            keep_top: 5,
            length_penalty: 1.0,
            max_new_tokens: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Length bounds are these quantiles of the in-domain sentence lengths.
    pub quantiles: [f64; 2],
    /// Restrict words to the in-domain vocabulary.
    pub use_vocab: bool,
    pub max_oov_per_sentence: usize,
    pub required_keywords: Vec<String>,
    pub banned_keywords: Vec<String>,
    pub max_duplicates: Option<usize>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            quantiles: [0.01, 0.99],
            use_vocab: true,
            max_oov_per_sentence: 0,
            required_keywords: Vec::new(),
            banned_keywords: Vec::new(),
            max_duplicates: Some(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NgramSection {
    pub order: usize,
    /// Minimum count per order; empty keeps everything.
    pub cutoffs: Vec<u64>,
    /// Add a general-domain n-gram model as a further mixture component.
    pub include_general: bool,
    /// Train the synthetic model on a seeded random subset of this size.
    pub synthetic_max_sentences: Option<usize>,
}

impl Default for NgramSection {
    fn default() -> Self {
        Self {
            order: 4,
            cutoffs: Vec::new(),
            include_general: false,
            synthetic_max_sentences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpolateSection {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        Self { tol: 1e-5, max_iters: 100 }
    }
}

/// Everything a pipeline run needs. Relative paths are resolved against the
/// directory of the config file. Per-stage seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub neural: NeuralSection,
    #[serde(default)]
    pub prefixes: PrefixSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub ngram: NgramSection,
    #[serde(default)]
    pub interpolate: InterpolateSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.general,
            &mut cfg.paths.in_domain_train,
            &mut cfg.paths.in_domain_dev,
            &mut cfg.paths.in_domain_test,
            &mut cfg.paths.work_dir,
        ] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("general", &self.paths.general),
            ("in_domain_train", &self.paths.in_domain_train),
            ("in_domain_dev", &self.paths.in_domain_dev),
            ("in_domain_test", &self.paths.in_domain_test),
        ] {
            if !p.is_file() {
                return Err(Error::Config(format!("paths.{name} does not exist: {}", p.display())));
            }
        }
        if self.generation.temperatures.is_empty() {
            return Err(Error::Config("generation.temperatures must not be empty".into()));
        }
        if self.prefixes.k_values.is_empty() {
            return Err(Error::Config("prefixes.k_values must not be empty".into()));
        }
        if self.ngram.order == 0 {
            return Err(Error::Config("ngram.order must be at least 1".into()));
        }
        if !self.ngram.cutoffs.is_empty() && self.ngram.cutoffs.len() != self.ngram.order {
            return Err(Error::Config(format!(
                "ngram.cutoffs has {} entries for order {}",
                self.ngram.cutoffs.len(),
                self.ngram.order
            )));
        }
        let [lo, hi] = self.filter.quantiles;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("filter.quantiles ({lo}, {hi}) must satisfy 0 <= low < high <= 1")));
        }
        Ok(())
    }
}
