//! One function per pipeline stage, reading and writing the artifacts named
//! in a [`RunConfig`]. The command-line tool is a thin wrapper around these.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{existing, required, ConfigError, RunConfig};
use crate::dataset::{build_dataset, load_tsv, save_tsv, select_label_classes, split_dataset, DatasetError, DatasetSplits, LabeledMolecule};
use crate::evaluation::{evaluate, EvalError, Evaluation};
use crate::explain::{
    aggregate_shares, attribution_csv, head_token_share, render_report, shares_csv, token_importance, ExplainError,
    Prediction,
};
use crate::extension::{classify_all, extend, extended_obo, propose_extension, ChangeReport, ClassificationResult, ExtensionError, ScoredClass};
use crate::fsutil::write_atomic;
use crate::model::{EncoderModel, LabeledSequence, ModelError, Mode};
use crate::ontology::{parse_obo, OntologyError, OntologyGraph};
use crate::tokenizer::{train_bpe, TokenSequence, Tokenizer, TokenizerError};
use crate::training::{append_epoch_logs, finetune, pretrain, TrainError, TrainOutcome};

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const PRETRAIN_CHECKPOINTS: &str = "pretrain_checkpoints";
pub const FINETUNE_CHECKPOINTS: &str = "finetune_checkpoints";
pub const CLASSIFICATIONS_FILE: &str = "classifications.json";
pub const CHANGES_FILE: &str = "changes.json";
pub const EXPLAIN_DIR: &str = "explain";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Mismatch(String),
}

impl PipelineError {
    /// Stable, machine-readable category for error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(ConfigError::MissingInput(_) | ConfigError::MissingPath(_)) => "missing_input",
            PipelineError::Config(_) => "config",
            PipelineError::Tokenizer(TokenizerError::VersionMismatch { .. })
            | PipelineError::Model(ModelError::VersionMismatch { .. })
            | PipelineError::Train(TrainError::Model(ModelError::VersionMismatch { .. }))
            | PipelineError::Eval(EvalError::Model(ModelError::VersionMismatch { .. })) => "version_mismatch",
            PipelineError::Ontology(_) => "ontology",
            PipelineError::Dataset(_) => "dataset",
            PipelineError::Tokenizer(_) => "tokenizer",
            PipelineError::Model(_) => "model",
            PipelineError::Train(TrainError::Unimplemented(_)) => "unimplemented",
            PipelineError::Train(TrainError::Numeric { .. }) => "numeric",
            PipelineError::Train(_) => "training",
            PipelineError::Eval(_) => "evaluation",
            PipelineError::Explain(_) => "explain",
            PipelineError::Extension(_) => "extension",
            PipelineError::Io { .. } => "io",
            PipelineError::Mismatch(_) => "mismatch",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Non-empty trimmed lines of a newline-delimited SMILES file.
pub fn read_smiles(path: &Path) -> Result<Vec<String>, PipelineError> {
    Ok(read_text(path)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn load_ontology(config: &RunConfig) -> Result<OntologyGraph, PipelineError> {
    let path = existing(&config.paths.ontology, "paths.ontology")?;
    Ok(parse_obo(&read_text(path)?)?)
}

fn load_dataset(config: &RunConfig) -> Result<DatasetSplits, PipelineError> {
    Ok(load_tsv(existing(&config.paths.dataset, "paths.dataset")?)?)
}

fn load_tokenizer(config: &RunConfig) -> Result<Tokenizer, PipelineError> {
    Ok(Tokenizer::load(existing(&config.paths.tokenizer, "paths.tokenizer")?)?)
}

fn load_model(path: &Path, tokenizer: &Tokenizer) -> Result<EncoderModel, PipelineError> {
    let model = EncoderModel::load(path)?;
    if model.config().vocab_size != tokenizer.vocab_size() {
        return Err(PipelineError::Mismatch(format!(
            "model {} expects a vocabulary of {} but the tokenizer has {}",
            path.display(),
            model.config().vocab_size,
            tokenizer.vocab_size()
        )));
    }
    Ok(model)
}

fn output_dir(config: &RunConfig) -> Result<&Path, PipelineError> {
    Ok(required(&config.paths.output, "paths.output")?)
}

/// Encodes with truncation to `max_len`, logging how many inputs were cut.
pub fn encode_all<S: AsRef<str>>(tokenizer: &Tokenizer, smiles: &[S], max_len: usize) -> Result<Vec<TokenSequence>, PipelineError> {
    let mut cut = 0;
    let mut out = Vec::with_capacity(smiles.len());
    for s in smiles {
        let (seq, truncated) = tokenizer.encode_truncated(s.as_ref(), max_len)?;
        cut += truncated as usize;
        out.push(seq);
    }
    if cut > 0 {
        log::warn!("{cut} of {} inputs truncated to {max_len} tokens", smiles.len());
    }
    Ok(out)
}

pub fn encode_labeled(tokenizer: &Tokenizer, rows: &[LabeledMolecule], max_len: usize) -> Result<Vec<LabeledSequence>, PipelineError> {
    let smiles: Vec<&str> = rows.iter().map(|m| m.smiles.as_str()).collect();
    Ok(encode_all(tokenizer, &smiles, max_len)?
        .into_iter()
        .zip(rows)
        .map(|(input, m)| LabeledSequence { input, labels: m.label_vector() })
        .collect())
}

fn reject_overwrite(input: &Path, output: &Path) -> Result<(), PipelineError> {
    if input == output {
        return Err(ConfigError::Invalid(format!("output {} would overwrite its input", output.display())).into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_labels: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Selects label classes, derives the labeled leaves and writes the three splits.
pub fn build_dataset_step(config: &RunConfig) -> Result<DatasetSummary, PipelineError> {
    let seed = config.seed()?;
    let graph = load_ontology(config)?;
    let out = required(&config.paths.dataset, "paths.dataset")?;
    let labels = select_label_classes(&graph, config.dataset.n_labels, config.dataset.min_members, seed)?;
    let (data, stats) = build_dataset(&graph, &labels)?;
    log::info!("{} labeled molecules over {} label classes", stats.molecule_count(), labels.len());
    let splits = split_dataset(&labels, &data, config.dataset.split_ratios, seed)?;
    save_tsv(&splits, out)?;
    Ok(DatasetSummary {
        n_labels: labels.len(),
        train: splits.train.len(),
        validation: splits.validation.len(),
        test: splits.test.len(),
    })
}

/// Learns the BPE vocabulary from the training split.
pub fn train_tokenizer_step(config: &RunConfig) -> Result<Tokenizer, PipelineError> {
    let splits = load_dataset(config)?;
    let out = required(&config.paths.tokenizer, "paths.tokenizer")?;
    let corpus: Vec<&str> = splits.train.iter().map(|m| m.smiles.as_str()).collect();
    let tokenizer = train_bpe(&corpus, config.tokenizer.bpe())?;
    log::info!("vocabulary of {} tokens, {} merges", tokenizer.vocab_size(), tokenizer.merges().len());
    tokenizer.save(out)?;
    Ok(tokenizer)
}

fn write_logs(path: &Path, outcome: &TrainOutcome) -> Result<(), PipelineError> {
    if path.exists() {
        fs::remove_file(path).map_err(io_err(path))?;
    }
    Ok(append_epoch_logs(path, &outcome.logs)?)
}

/// Masked-language-model pretraining. With zero epochs the starting model is
/// written out unchanged.
pub fn pretrain_step(config: &RunConfig) -> Result<Option<TrainOutcome>, PipelineError> {
    let seed = config.seed()?;
    let tokenizer = load_tokenizer(config)?;
    let out = required(&config.paths.pretrained_model, "paths.pretrained_model")?;
    if let Some(init) = &config.paths.init_model {
        reject_overwrite(init, out)?;
        if !init.exists() {
            return Err(ConfigError::MissingInput(init.clone()).into());
        }
        if config.pretrain.epochs == 0 {
            load_model(init, &tokenizer)?;
            write(out, &fs::read(init).map_err(io_err(init))?)?;
            return Ok(None);
        }
    }
    let splits = load_dataset(config)?;
    let mut model = match &config.paths.init_model {
        Some(init) => load_model(init, &tokenizer)?,
        None => EncoderModel::init(config.model.model_config(tokenizer.vocab_size(), splits.labels.len(), seed))?,
    };
    if config.pretrain.epochs == 0 {
        model.save(out)?;
        return Ok(None);
    }
    let max_len = model.config().max_len;
    let mut smiles: Vec<String> = splits.train.iter().map(|m| m.smiles.clone()).collect();
    if let Some(extra) = &config.paths.pretrain_corpus {
        let lines = read_smiles(extra)?;
        log::info!("{} extra unlabeled strings added to the pretraining corpus", lines.len());
        smiles.extend(lines);
    }
    let corpus = encode_all(&tokenizer, &smiles, max_len)?;
    let validation: Vec<&str> = splits.validation.iter().map(|m| m.smiles.as_str()).collect();
    let validation = encode_all(&tokenizer, &validation, max_len)?;
    let dir = output_dir(config)?;
    let train = config.pretrain.train_config(seed, &config.masking, config.threshold, Some(dir.join(PRETRAIN_CHECKPOINTS)));
    let outcome = pretrain(&mut model, &corpus, &validation, &train, None)?;
    write_logs(&dir.join(PRETRAIN_LOG), &outcome)?;
    model.save(out)?;
    Ok(Some(outcome))
}

/// Multi-label fine-tuning of the pretrained model.
pub fn finetune_step(config: &RunConfig) -> Result<TrainOutcome, PipelineError> {
    let seed = config.seed()?;
    let tokenizer = load_tokenizer(config)?;
    let splits = load_dataset(config)?;
    let input = existing(&config.paths.pretrained_model, "paths.pretrained_model")?;
    let out = required(&config.paths.model, "paths.model")?;
    reject_overwrite(input, out)?;
    let mut model = load_model(input, &tokenizer)?;
    if model.config().n_labels != splits.labels.len() {
        return Err(PipelineError::Mismatch(format!(
            "model has {} outputs but the dataset has {} labels",
            model.config().n_labels,
            splits.labels.len()
        )));
    }
    let max_len = model.config().max_len;
    let train = encode_labeled(&tokenizer, &splits.train, max_len)?;
    let validation = encode_labeled(&tokenizer, &splits.validation, max_len)?;
    let dir = output_dir(config)?;
    let tc = config.finetune.train_config(seed, &config.masking, config.threshold, Some(dir.join(FINETUNE_CHECKPOINTS)));
    let outcome = finetune(&mut model, &train, &validation, &tc, None)?;
    write_logs(&dir.join(FINETUNE_LOG), &outcome)?;
    model.save(out)?;
    Ok(outcome)
}

/// Scores the fine-tuned model on the test split and writes the report and CSVs.
pub fn evaluate_step(config: &RunConfig) -> Result<Evaluation, PipelineError> {
    let tokenizer = load_tokenizer(config)?;
    let splits = load_dataset(config)?;
    let model = load_model(existing(&config.paths.model, "paths.model")?, &tokenizer)?;
    let inputs = encode_all(&tokenizer, &splits.test.iter().map(|m| m.smiles.as_str()).collect::<Vec<_>>(), model.config().max_len)?;
    let y_true = splits.test.iter().map(|m| m.labels.clone()).collect();
    let eval = evaluate(&model, &inputs, y_true, &splits.labels, config.threshold)?;
    eval.write(output_dir(config)?)?;
    log::info!("test micro F1 {:.4} samples F1 {:.4}", eval.report.micro.f1, eval.report.samples.f1);
    Ok(eval)
}

#[derive(Serialize)]
struct ClassificationRecord<'a> {
    smiles: &'a str,
    accepted: &'a [ScoredClass],
    below_threshold: bool,
    suggestions: &'a [ScoredClass],
    truncated: bool,
}

fn classify_inputs(config: &RunConfig) -> Result<(Tokenizer, EncoderModel, Vec<ClassificationResult>), PipelineError> {
    let tokenizer = load_tokenizer(config)?;
    let splits = load_dataset(config)?;
    let model = load_model(existing(&config.paths.model, "paths.model")?, &tokenizer)?;
    let smiles = read_smiles(existing(&config.paths.input, "paths.input")?)?;
    let results = classify_all(&model, &tokenizer, &splits.labels, &smiles, config.threshold, config.extend.top_k)?;
    Ok((tokenizer, model, results))
}

/// Classifies every input line and writes one JSON record per molecule.
pub fn classify_step(config: &RunConfig) -> Result<Vec<ClassificationResult>, PipelineError> {
    let (_, _, results) = classify_inputs(config)?;
    let records: Vec<ClassificationRecord> = results
        .iter()
        .map(|r| ClassificationRecord {
            smiles: &r.smiles,
            accepted: &r.accepted,
            below_threshold: r.below_threshold,
            suggestions: if r.below_threshold { &r.top_k } else { &[] },
            truncated: r.truncated,
        })
        .collect();
    let mut json = serde_json::to_string_pretty(&records).expect("serializable");
    json.push('\n');
    write(&output_dir(config)?.join(CLASSIFICATIONS_FILE), json.as_bytes())?;
    Ok(results)
}

/// Writes an HTML report and attribution CSVs per input molecule.
pub fn explain_step(config: &RunConfig) -> Result<usize, PipelineError> {
    let (tokenizer, model, results) = classify_inputs(config)?;
    let names: BTreeMap<String, String> = match &config.paths.ontology {
        Some(p) if p.exists() => load_ontology(config)?.classes().map(|c| (c.id.as_str().to_string(), c.name.clone())).collect(),
        _ => BTreeMap::new(),
    };
    let dir = output_dir(config)?.join(EXPLAIN_DIR);
    let mut all_shares = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let (seq, _) = tokenizer.encode_truncated(&r.smiles, model.config().max_len)?;
        let fwd = model.forward(std::slice::from_ref(&seq), true, Mode::Inference)?.remove(0);
        let attr = token_importance(fwd.attention.as_ref(), &seq, &tokenizer, config.explain.layer)?;
        let att = fwd.attention.as_ref().ok_or(ExplainError::NoAttention)?;
        let shares = head_token_share(att, &seq, &tokenizer)?;
        let predictions: Vec<Prediction> = r
            .accepted
            .iter()
            .map(|s| Prediction {
                class_id: s.class.as_str().to_string(),
                name: names.get(s.class.as_str()).cloned().unwrap_or_default(),
                probability: s.probability,
            })
            .collect();
        let stem = format!("molecule_{i:04}");
        write(&dir.join(format!("{stem}.html")), render_report(&r.smiles, &attr, &shares, &predictions).as_bytes())?;
        write(&dir.join(format!("{stem}_attribution.csv")), &attribution_csv(&attr)?)?;
        write(&dir.join(format!("{stem}_shares.csv")), &shares_csv(&shares)?)?;
        all_shares.push(shares);
    }
    if config.explain.aggregate {
        if let Some(agg) = aggregate_shares(&all_shares) {
            write(&dir.join("aggregate_shares.csv"), &shares_csv(&agg)?)?;
        }
    }
    Ok(results.len())
}

/// Classifies the inputs and inserts them as new leaves under their most specific predicted classes.
pub fn extend_step(config: &RunConfig) -> Result<ChangeReport, PipelineError> {
    let graph = load_ontology(config)?;
    let out = required(&config.paths.extended_ontology, "paths.extended_ontology")?;
    reject_overwrite(required(&config.paths.ontology, "paths.ontology")?, out)?;
    let (_, _, results) = classify_inputs(config)?;
    let proposals = propose_extension(&graph, &results, &config.extend.namespace())?;
    let (extended, report) = extend(&graph, &proposals)?;
    write(out, extended_obo(&extended, &report).as_bytes())?;
    write(&output_dir(config)?.join(CHANGES_FILE), report.to_json().as_bytes())?;
    log::info!("{} classes added, {} inputs below threshold", report.added.len(), report.below_threshold.len());
    Ok(report)
}
