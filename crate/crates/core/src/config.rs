//! Run configuration: a TOML file with one section per pipeline stage.
//!
//! Every key is optional except `seed`, which must come from the file or the
//! command line. Defaults are the reference hyperparameters. Relative paths
//! are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{default_split_ratios, DEFAULT_MIN_MEMBERS};
use crate::evaluation::DEFAULT_THRESHOLD;
use crate::extension::{IdNamespace, DEFAULT_TOP_K};
use crate::model::{Activation, MlmLoss, ModelConfig};
use crate::tokenizer::{BpeConfig, DEFAULT_MAX_LEN, DEFAULT_MIN_FREQUENCY, DEFAULT_VOCAB_SIZE};
use crate::training::{AdamConfig, MaskingPolicy, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("no seed given: set `seed` in the config file or pass --seed")]
    MissingSeed,
    #[error("no path configured for `{0}`")]
    MissingPath(&'static str),
    #[error("input {} does not exist", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Source ontology in OBO format.
    pub ontology: Option<PathBuf>,
    /// Directory holding train/validation/test TSV files and labels.txt.
    pub dataset: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    /// Optional starting weights for pretraining; a fresh model otherwise.
    pub init_model: Option<PathBuf>,
    /// Output of pretraining, input of fine-tuning.
    pub pretrained_model: Option<PathBuf>,
    /// Fine-tuned classifier.
    pub model: Option<PathBuf>,
    /// Optional newline-delimited unlabeled SMILES added to the pretraining corpus.
    pub pretrain_corpus: Option<PathBuf>,
    /// Newline-delimited SMILES to classify, explain or add.
    pub input: Option<PathBuf>,
    /// Reports, logs and checkpoints.
    pub output: Option<PathBuf>,
    /// Extended ontology written by `extend`.
    pub extended_ontology: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_labels: usize,
    pub min_members: usize,
    /// Train, validation, test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n_labels: 500, min_members: DEFAULT_MIN_MEMBERS, split_ratios: default_split_ratios() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection { vocab_size: DEFAULT_VOCAB_SIZE, min_frequency: DEFAULT_MIN_FREQUENCY }
    }
}

impl TokenizerSection {
    pub fn bpe(&self) -> BpeConfig {
        BpeConfig { target_vocab: self.vocab_size, min_frequency: self.min_frequency }
    }
}

/// Architecture; vocabulary size and label count come from the tokenizer and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub attention_dropout: f64,
    pub activation: Activation,
    pub mlm_loss: MlmLoss,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            hidden_dim: m.hidden_dim,
            ffn_dim: m.ffn_dim,
            max_len: DEFAULT_MAX_LEN,
            attention_dropout: m.attention_dropout,
            activation: m.activation,
            mlm_loss: m.mlm_loss,
            init_std: m.init_std,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, n_labels: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
            n_labels,
            attention_dropout: self.attention_dropout,
            activation: self.activation,
            mlm_loss: self.mlm_loss,
            init_std: self.init_std,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Write `last.ckpt` every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub shuffle: bool,
    /// Accepted for completeness; any value is rejected as unimplemented.
    pub lr_schedule: Option<String>,
    pub early_stopping_patience: Option<usize>,
    pub gradient_clip: Option<f64>,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self::with_epochs(TrainConfig::default().epochs)
    }
}

impl PhaseSection {
    fn with_epochs(epochs: usize) -> Self {
        let t = TrainConfig::default();
        let a = AdamConfig::default();
        PhaseSection {
            epochs,
            batch_size: t.batch_size,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            weight_decay: a.weight_decay,
            checkpoint_every: t.checkpoint_every,
            shuffle: t.shuffle,
            lr_schedule: None,
            early_stopping_patience: None,
            gradient_clip: None,
        }
    }

    pub fn train_config(&self, seed: u64, masking: &MaskingSection, threshold: f64, dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
                weight_decay: self.weight_decay,
            },
            seed,
            mask_probability: masking.probability,
            mask_fractions: [masking.mask_fraction, masking.random_fraction, masking.keep_fraction],
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: dir,
            shuffle: self.shuffle,
            threshold,
            lr_schedule: self.lr_schedule.clone(),
            early_stopping_patience: self.early_stopping_patience,
            gradient_clip: self.gradient_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingSection {
    pub probability: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
}

impl Default for MaskingSection {
    fn default() -> Self {
        let p = MaskingPolicy::new(0.15, 0);
        MaskingSection {
            probability: p.mask_probability,
            mask_fraction: p.mask_fraction,
            random_fraction: p.random_fraction,
            keep_fraction: p.keep_fraction,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// Layer whose attention scores tokens; the last layer when unset.
    pub layer: Option<usize>,
    /// Also write head×token shares averaged over all inputs.
    pub aggregate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtendSection {
    pub id_prefix: String,
    pub id_width: usize,
    pub top_k: usize,
}

impl Default for ExtendSection {
    fn default() -> Self {
        let ns = IdNamespace::default();
        ExtendSection { id_prefix: ns.prefix, id_width: ns.width, top_k: DEFAULT_TOP_K }
    }
}

impl ExtendSection {
    pub fn namespace(&self) -> IdNamespace {
        IdNamespace { prefix: self.id_prefix.clone(), width: self.id_width }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threshold: f64,
    pub paths: Paths,
    pub dataset: DatasetSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub masking: MaskingSection,
    pub pretrain: PhaseSection,
    pub finetune: PhaseSection,
    pub explain: ExplainSection,
    pub extend: ExtendSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threshold: DEFAULT_THRESHOLD,
            paths: Paths::default(),
            dataset: DatasetSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            masking: MaskingSection::default(),
            pretrain: PhaseSection::with_epochs(100),
            finetune: PhaseSection::with_epochs(30),
            explain: ExplainSection::default(),
            extend: ExtendSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut config = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut config.paths;
        for slot in [
            &mut p.ontology,
            &mut p.dataset,
            &mut p.tokenizer,
            &mut p.init_model,
            &mut p.pretrained_model,
            &mut p.model,
            &mut p.pretrain_corpus,
            &mut p.input,
            &mut p.output,
            &mut p.extended_ontology,
        ] {
            resolve(base, slot);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ConfigError::Invalid(format!("threshold {} must lie strictly between 0 and 1", self.threshold)));
        }
        let m = &self.masking;
        if (m.mask_fraction + m.random_fraction + m.keep_fraction - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid("masking fractions must sum to 1".into()));
        }
        for (name, phase) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if phase.batch_size == 0 {
                return Err(ConfigError::Invalid(format!("{name}.batch_size must be positive")));
            }
        }
        Ok(())
    }
}

/// Returns the configured path, failing when it is unset.
pub fn required<'a>(path: &'a Option<PathBuf>, key: &'static str) -> Result<&'a Path, ConfigError> {
    path.as_deref().ok_or(ConfigError::MissingPath(key))
}

/// Like [`required`] but also checks that the file or directory exists.
pub fn existing<'a>(path: &'a Option<PathBuf>, key: &'static str) -> Result<&'a Path, ConfigError> {
    let p = required(path, key)?;
    if p.exists() {
        Ok(p)
    } else {
        Err(ConfigError::MissingInput(p.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.model.n_heads, c.model.n_layers), (12, 6));
        assert_eq!(c.model.attention_dropout, 0.1);
        assert_eq!(c.model.activation, Activation::Gelu);
        assert_eq!((c.pretrain.epochs, c.finetune.epochs), (100, 30));
        assert_eq!((c.pretrain.batch_size, c.finetune.batch_size), (4, 4));
        assert_eq!(c.masking.probability, 0.15);
        assert_eq!(c.tokenizer.vocab_size, 1395);
        assert!(c.pretrain.weight_decay > 0.0);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let text = "seed = 3\n[pretrain]\nepochs = 2\n[paths]\nontology = \"a/b.obo\"\n";
        let c = RunConfig::parse(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.seed().unwrap(), 3);
        assert_eq!(c.pretrain.epochs, 2);
        assert_eq!(c.pretrain.batch_size, 4);
        assert_eq!(c.finetune.epochs, 30);
        let round = RunConfig::parse(&c.to_toml(), Path::new("y.toml")).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        let c = RunConfig::parse("", Path::new("x.toml")).unwrap();
        assert!(matches!(c.seed(), Err(ConfigError::MissingSeed)));
        assert!(matches!(RunConfig::parse("sed = 1", Path::new("x.toml")), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 1\n[paths]\ndataset = \"data\"\nmodel = \"/abs/m.bin\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.paths.dataset.unwrap(), dir.path().join("data"));
        assert_eq!(c.paths.model.unwrap(), PathBuf::from("/abs/m.bin"));
    }
}
