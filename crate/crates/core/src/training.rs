//! Dynamic masking, AdamW, and the pretraining and fine-tuning loops.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{binarize, prf, Averaging, EvalError, DEFAULT_THRESHOLD};
use crate::fsutil::write_atomic;
use crate::model::persist::{read_model, write_model, ByteReader, ByteWriter};
use crate::model::{EncoderModel, LabeledSequence, MaskedSequence, ModelError, Mode, ParameterStore, TrainBatch};
use crate::tokenizer::{TokenSequence, BOS, EOS, MASK, NUM_SPECIAL, PAD};

pub const OPTIMIZER_MAGIC: &[u8; 8] = b"ONTXOPT\0";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Stream id reserved for validation masking, kept apart from epoch streams.
pub const VALIDATION_MASK_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} is not implemented")]
    Unimplemented(&'static str),
    #[error("non-finite value in {parameter} at epoch {epoch}")]
    Numeric { parameter: String, epoch: usize },
    #[error("no training data")]
    EmptyData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Generator for one (seed, stream) pair.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_probability: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub seed: u64,
    pub epoch: u64,
    /// Mask one token in sequences where the draw selected none.
    pub force_minimum: bool,
}

impl MaskingPolicy {
    pub fn new(mask_probability: f64, seed: u64) -> Self {
        MaskingPolicy {
            mask_probability,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            seed,
            epoch: 0,
            force_minimum: true,
        }
    }

    pub fn at_epoch(self, epoch: u64) -> Self {
        MaskingPolicy { epoch, ..self }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fr = [self.mask_fraction, self.random_fraction, self.keep_fraction];
        if !(0.0..=1.0).contains(&self.mask_probability) || fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(TrainError::InvalidConfig("masking probabilities must lie in [0, 1]".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TrainError::InvalidConfig("mask/random/keep fractions must sum to 1".into()));
        }
        Ok(())
    }
}

pub fn is_maskable(id: u32) -> bool {
    !matches!(id, PAD | BOS | EOS | MASK)
}

/// Selects tokens with `mask_probability` and replaces them by MASK, a random
/// non-special id, or themselves. Randomness derives from `(seed, epoch)` only,
/// so the same policy always gives the same result for the same batch.
pub fn apply_dynamic_masking(batch: &[TokenSequence], policy: &MaskingPolicy, vocab_size: usize) -> Vec<MaskedSequence> {
    let mut rng = derive_rng(policy.seed, policy.epoch);
    batch
        .iter()
        .map(|seq| {
            let candidates: Vec<usize> = (0..seq.len()).filter(|&i| is_maskable(seq.ids[i])).collect();
            let mut chosen: Vec<usize> =
                candidates.iter().copied().filter(|_| rng.random::<f64>() < policy.mask_probability).collect();
            if chosen.is_empty() && policy.force_minimum && !candidates.is_empty() {
                chosen.push(candidates[rng.random_range(0..candidates.len())]);
            }
            let mut input = seq.clone();
            let mut targets = Vec::with_capacity(chosen.len());
            for pos in chosen {
                targets.push((pos, seq.ids[pos]));
                let r: f64 = rng.random();
                if r < policy.mask_fraction {
                    input.ids[pos] = MASK;
                } else if r < policy.mask_fraction + policy.random_fraction {
                    input.ids[pos] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
                }
            }
            MaskedSequence { input, targets }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.infos().iter().map(|i| vec![0.0; i.numel()]).collect();
        OptimizerState { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One AdamW update from the gradients held in `params`. Decay is applied
    /// to the weight first, then the bias-corrected moment step.
    pub fn step(&mut self, params: &mut ParameterStore) -> Result<(), TrainError> {
        if let Some(name) = params.first_non_finite_grad() {
            return Err(TrainError::Numeric { parameter: name.to_string(), epoch: 0 });
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (infos, values, grads) = params.values_and_grads_mut();
        for (slot, info) in infos.iter().enumerate() {
            let (w, g, m, v) = (&mut values[slot], &grads[slot], &mut self.m[slot], &mut self.v[slot]);
            let decay = if info.decay { c.learning_rate * c.weight_decay } else { 0.0 };
            for i in 0..w.len() {
                w[i] -= decay * w[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }

    fn write(&self, w: &mut ByteWriter) {
        w.bytes(OPTIMIZER_MAGIC);
        w.u64(self.step);
        for x in [self.config.learning_rate, self.config.beta1, self.config.beta2, self.config.epsilon, self.config.weight_decay] {
            w.f64(x);
        }
        w.u32(self.m.len() as u32);
        for (m, v) in self.m.iter().zip(&self.v) {
            w.u64(m.len() as u64);
            w.f64s(m);
            w.f64s(v);
        }
    }

    fn read(r: &mut ByteReader<'_>, params: &ParameterStore) -> Result<Self, ModelError> {
        if r.bytes(8)? != OPTIMIZER_MAGIC {
            return Err(ModelError::Format("missing optimizer section".into()));
        }
        let step = r.u64()?;
        let config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            weight_decay: r.f64()?,
        };
        let n = r.u32()? as usize;
        if n != params.len() {
            return Err(ModelError::Format("optimizer state does not match parameters".into()));
        }
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for slot in 0..n {
            let len = r.u64()? as usize;
            if len != params.info(slot).numel() {
                return Err(ModelError::Format(format!("moment size mismatch for {}", params.info(slot).name)));
            }
            m.push(r.f64s(len)?);
            v.push(r.f64s(len)?);
        }
        Ok(OptimizerState { config, step, m, v })
    }
}

pub fn checkpoint_bytes(model: &EncoderModel, optimizer: &OptimizerState) -> Vec<u8> {
    let mut w = ByteWriter::default();
    write_model(&mut w, model);
    optimizer.write(&mut w);
    w.buf
}

pub fn save_checkpoint(path: &Path, model: &EncoderModel, optimizer: &OptimizerState) -> Result<(), TrainError> {
    write_atomic(path, &checkpoint_bytes(model, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, OptimizerState), TrainError> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let model = read_model(&mut r)?;
    let opt = OptimizerState::read(&mut r, model.params())?;
    if !r.is_at_end() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok((model, opt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask_probability: f64,
    /// Mask / random-token / keep split for selected tokens.
    pub mask_fractions: [f64; 3],
    /// Write `last.ckpt` every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub shuffle: bool,
    pub threshold: f64,
    pub lr_schedule: Option<String>,
    pub early_stopping_patience: Option<usize>,
    pub gradient_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 0,
            mask_probability: 0.15,
            mask_fractions: [0.8, 0.1, 0.1],
            checkpoint_every: 0,
            checkpoint_dir: None,
            shuffle: true,
            threshold: DEFAULT_THRESHOLD,
            lr_schedule: None,
            early_stopping_patience: None,
            gradient_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr_schedule.is_some() {
            return Err(TrainError::Unimplemented("learning-rate schedule"));
        }
        if self.early_stopping_patience.is_some() {
            return Err(TrainError::Unimplemented("early stopping"));
        }
        if self.gradient_clip.is_some() {
            return Err(TrainError::Unimplemented("gradient clipping"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 || a.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("invalid optimizer hyperparameters".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(TrainError::InvalidConfig("threshold must lie in [0, 1]".into()));
        }
        MaskingPolicy::new(self.mask_probability, self.seed).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f1_samples: Option<f64>,
    pub seconds: f64,
}

/// Appends rows to a CSV log, writing the header when the file is new or empty.
pub fn append_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<(), TrainError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for log in logs {
        w.serialize(log)?;
    }
    w.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub optimizer: OptimizerState,
    /// Epoch (1-based) whose weights were saved as best, if any.
    pub best_epoch: Option<usize>,
    pub best_model: Option<EncoderModel>,
}

/// Called after every epoch with that epoch's log and the current weights.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochLog, &EncoderModel);

fn shuffled_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        // stream space for shuffling is offset from masking streams
        order.shuffle(&mut derive_rng(seed ^ 0x5348_5546_464c_4500, epoch));
    }
    order
}

struct Loop<'a> {
    model: &'a mut EncoderModel,
    config: &'a TrainConfig,
    optimizer: OptimizerState,
    snapshot: ParameterStore,
}

impl Loop<'_> {
    fn run_batches<T: Clone>(
        &mut self,
        epoch: usize,
        items: &[T],
        order: &[usize],
        make: impl for<'b> Fn(&'b [T]) -> TrainBatch<'b>,
    ) -> Result<f64, TrainError> {
        let mut dropout_rng = derive_rng(self.config.seed ^ 0x4452_4f50, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<T> = chunk.iter().map(|&i| items[i].clone()).collect();
            let step = self
                .model
                .loss_and_grad(make(&batch), Mode::Train(&mut dropout_rng))
                .map_err(TrainError::from)
                .and_then(|loss| self.optimizer.step(self.model.params_mut()).map(|_| loss));
            match step {
                Ok(loss) => {
                    total += loss;
                    batches += 1;
                }
                Err(e) => return Err(self.numeric_failure(e, epoch)),
            }
            if let Some(name) = self.model.params().first_non_finite_value() {
                let name = name.to_string();
                return Err(self.numeric_failure(TrainError::Numeric { parameter: name, epoch }, epoch));
            }
        }
        Ok(total / batches.max(1) as f64)
    }

    /// Restores the last good weights and tags the error with the epoch.
    fn numeric_failure(&mut self, err: TrainError, epoch: usize) -> TrainError {
        let parameter = match err {
            TrainError::Model(ModelError::Numeric { parameter }) => parameter,
            TrainError::Numeric { parameter, .. } => parameter,
            other => return other,
        };
        self.model.params_mut().copy_values_from(&self.snapshot);
        log::error!("non-finite value in {parameter} at epoch {epoch}; restored weights from previous epoch");
        TrainError::Numeric { parameter, epoch }
    }

    fn checkpoint(&self, epoch: usize, is_last: bool) -> Result<(), TrainError> {
        let Some(dir) = &self.config.checkpoint_dir else { return Ok(()) };
        let every = self.config.checkpoint_every;
        if is_last || (every > 0 && epoch % every == 0) {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&dir.join(LAST_CHECKPOINT), self.model, &self.optimizer)?;
        }
        Ok(())
    }
}

fn non_finite_check(loss: f64, epoch: usize) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::Numeric { parameter: "validation loss".into(), epoch })
    }
}

/// Masked-language-model training. Masks are redrawn every epoch; the
/// validation set uses one fixed mask for all epochs.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[TokenSequence],
    validation: &[TokenSequence],
    config: &TrainConfig,
    observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let optimizer = OptimizerState::new(model.params(), config.adam);
    pretrain_resume(model, corpus, validation, config, optimizer, observer)
}

/// [`pretrain`] continuing from a given optimizer state (e.g. a loaded checkpoint).
pub fn pretrain_resume(
    model: &mut EncoderModel,
    corpus: &[TokenSequence],
    validation: &[TokenSequence],
    config: &TrainConfig,
    optimizer: OptimizerState,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let vocab = model.config().vocab_size;
    let [mask_fraction, random_fraction, keep_fraction] = config.mask_fractions;
    let policy = MaskingPolicy {
        mask_fraction,
        random_fraction,
        keep_fraction,
        ..MaskingPolicy::new(config.mask_probability, config.seed)
    };
    policy.validate()?;
    let val_masked = apply_dynamic_masking(validation, &policy.at_epoch(VALIDATION_MASK_STREAM), vocab);
    let val_masked: Vec<MaskedSequence> = val_masked.into_iter().filter(|m| !m.targets.is_empty()).collect();
    let corpus: Vec<&TokenSequence> = corpus.iter().filter(|s| s.ids.iter().any(|&id| is_maskable(id))).collect();
    if corpus.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptyData);
    }
    let corpus: Vec<TokenSequence> = corpus.into_iter().cloned().collect();
    let snapshot = model.params().clone();
    let mut lp = Loop { model, config, optimizer, snapshot };
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        lp.snapshot.copy_values_from(lp.model.params());
        let masked = apply_dynamic_masking(&corpus, &policy.at_epoch(epoch as u64), vocab);
        let order = shuffled_order(masked.len(), config.seed, epoch as u64, config.shuffle);
        let train_loss = lp.run_batches(epoch, &masked, &order, |b| TrainBatch::Mlm(b))?;
        let val_loss = if val_masked.is_empty() {
            None
        } else {
            let loss = lp.model.loss(TrainBatch::Mlm(&val_masked), Mode::Inference)?;
            Some(non_finite_check(loss, epoch)?)
        };
        let log = EpochLog {
            epoch,
            phase: Phase::Pretrain,
            train_loss,
            val_loss,
            val_f1_samples: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: train_loss {train_loss:.5} val_loss {val_loss:?}");
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, lp.model.clone()));
                save_best(config, lp.model, &lp.optimizer)?;
            }
        }
        lp.checkpoint(epoch, epoch == config.epochs)?;
        if let Some(obs) = observer.as_mut() {
            obs(&log, lp.model);
        }
        logs.push(log);
    }
    let (best_epoch, best_model) = best.map_or((None, None), |(_, e, m)| (Some(e), Some(m)));
    Ok(TrainOutcome { logs, optimizer: lp.optimizer, best_epoch, best_model })
}

fn save_best(config: &TrainConfig, model: &EncoderModel, optimizer: &OptimizerState) -> Result<(), TrainError> {
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(BEST_CHECKPOINT), model, optimizer)?;
    }
    Ok(())
}

/// Samples-averaged F1 of `model` on labelled data.
pub fn samples_f1(model: &EncoderModel, data: &[LabeledSequence], threshold: f64) -> Result<f64, TrainError> {
    let inputs: Vec<TokenSequence> = data.iter().map(|d| d.input.clone()).collect();
    let scores = crate::evaluation::predict_scores(model, &inputs)?;
    let y_true: Vec<Vec<bool>> = data.iter().map(|d| d.labels.iter().map(|&y| y >= 0.5).collect()).collect();
    Ok(prf(&y_true, &binarize(&scores, threshold), Averaging::Samples)?.f1)
}

/// Multi-label fine-tuning. The best epoch is chosen by validation samples-F1.
pub fn finetune(
    model: &mut EncoderModel,
    train: &[LabeledSequence],
    validation: &[LabeledSequence],
    config: &TrainConfig,
    mut observer: Option<EpochObserver<'_>>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let k = model.config().n_labels;
    if let Some(bad) = train.iter().chain(validation).find(|d| d.labels.len() != k) {
        return Err(ModelError::LabelMismatch { expected: k, found: bad.labels.len() }.into());
    }
    if train.is_empty() && config.epochs > 0 {
        return Err(TrainError::EmptyData);
    }
    let optimizer = OptimizerState::new(model.params(), config.adam);
    let snapshot = model.params().clone();
    let mut lp = Loop { model, config, optimizer, snapshot };
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, EncoderModel)> = None;
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        lp.snapshot.copy_values_from(lp.model.params());
        let order = shuffled_order(train.len(), config.seed, epoch as u64, config.shuffle);
        let train_loss = lp.run_batches(epoch, train, &order, |b| TrainBatch::Multilabel(b))?;
        let (val_loss, val_f1) = if validation.is_empty() {
            (None, None)
        } else {
            let loss = lp.model.loss(TrainBatch::Multilabel(validation), Mode::Inference)?;
            (Some(non_finite_check(loss, epoch)?), Some(samples_f1(lp.model, validation, config.threshold)?))
        };
        let log = EpochLog {
            epoch,
            phase: Phase::Finetune,
            train_loss,
            val_loss,
            val_f1_samples: val_f1,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("finetune epoch {epoch}: train_loss {train_loss:.5} val_loss {val_loss:?} val_f1_samples {val_f1:?}");
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, lp.model.clone()));
                save_best(config, lp.model, &lp.optimizer)?;
            }
        }
        lp.checkpoint(epoch, epoch == config.epochs)?;
        if let Some(obs) = observer.as_mut() {
            obs(&log, lp.model);
        }
        logs.push(log);
    }
    let (best_epoch, best_model) = best.map_or((None, None), |(_, e, m)| (Some(e), Some(m)));
    Ok(TrainOutcome { logs, optimizer: lp.optimizer, best_epoch, best_model })
}
