//! Encoder-only transformer over BPE token ids.
//!
//! Learned token and position embeddings feed a stack of pre-norm blocks
//! (`x + Attn(LN(x))`, then `x + FFN(LN(x))`) followed by a final layer norm.
//! Two heads read the final hidden states:
//!
//! * MLM: logits over the vocabulary, `h · Eᵀ + bias`, tied to the token embedding `E`.
//! * Classifier: `h[0] · W + b` on the BOS position, sigmoid per label.
//!
//! Dropout is applied to attention probabilities only. The backward pass is
//! written out by hand; every sequence in a batch is processed in order and its
//! gradients accumulated in that order, so results are bit-reproducible.

mod ops;
mod params;
pub mod persist;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{bce_with_logits, sigmoid, Activation};
pub use params::{ParamInfo, ParameterStore};

use crate::tokenizer::{TokenSequence, PAD};
use ops::{layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, LayerNormCache};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },
    #[error("sequence has no non-padding token")]
    EmptySequence,
    #[error("position {pos} is outside a sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("expected {expected} labels, found {found}")]
    LabelMismatch { expected: usize, found: usize },
    #[error("batch is empty or has no masked targets")]
    EmptyBatch,
    #[error("non-finite value in {parameter}")]
    Numeric { parameter: String },
    #[error("model file: {0}")]
    Format(String),
    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pretraining loss over the vocabulary at masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlmLoss {
    /// Softmax cross-entropy against the original token.
    #[default]
    CrossEntropy,
    /// Independent sigmoid per vocabulary entry against a one-hot target.
    Bce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_labels: usize,
    pub attention_dropout: f64,
    pub activation: Activation,
    pub mlm_loss: MlmLoss,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            vocab_size: 1395,
            max_len: 512,
            n_labels: 500,
            attention_dropout: 0.1,
            activation: Activation::Gelu,
            mlm_loss: MlmLoss::CrossEntropy,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_labels", self.n_labels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("attention_dropout must be in [0, 1)");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIAL as usize {
            return bad("vocab_size must exceed the reserved token count");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn declarations(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init, bool)> {
    let (d, f) = (c.hidden_dim, c.ffn_dim);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![c.vocab_size, d], Init::Normal, true),
        ("embeddings.position".to_string(), vec![c.max_len, d], Init::Normal, true),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d], Init::Ones, false),
            (p("ln1.beta"), vec![d], Init::Zeros, false),
            (p("attn.query.weight"), vec![d, d], Init::Normal, true),
            (p("attn.query.bias"), vec![d], Init::Zeros, false),
            (p("attn.key.weight"), vec![d, d], Init::Normal, true),
            (p("attn.key.bias"), vec![d], Init::Zeros, false),
            (p("attn.value.weight"), vec![d, d], Init::Normal, true),
            (p("attn.value.bias"), vec![d], Init::Zeros, false),
            (p("attn.output.weight"), vec![d, d], Init::Normal, true),
            (p("attn.output.bias"), vec![d], Init::Zeros, false),
            (p("ln2.gamma"), vec![d], Init::Ones, false),
            (p("ln2.beta"), vec![d], Init::Zeros, false),
            (p("ffn.in.weight"), vec![d, f], Init::Normal, true),
            (p("ffn.in.bias"), vec![f], Init::Zeros, false),
            (p("ffn.out.weight"), vec![f, d], Init::Normal, true),
            (p("ffn.out.bias"), vec![d], Init::Zeros, false),
        ]);
    }
    out.extend([
        ("final_ln.gamma".to_string(), vec![d], Init::Ones, false),
        ("final_ln.beta".to_string(), vec![d], Init::Zeros, false),
        ("mlm.bias".to_string(), vec![c.vocab_size], Init::Zeros, false),
        ("classifier.weight".to_string(), vec![d, c.n_labels], Init::Normal, true),
        ("classifier.bias".to_string(), vec![c.n_labels], Init::Zeros, false),
    ]);
    out
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerSlots>,
    lnf_g: usize,
    lnf_b: usize,
    mlm_bias: usize,
    cls_w: usize,
    cls_b: usize,
}

impl Layout {
    fn resolve(config: &ModelConfig, store: &ParameterStore) -> Result<Layout, ModelError> {
        let decls = declarations(config);
        if store.len() != decls.len() {
            return Err(ModelError::Format(format!("expected {} parameters, found {}", decls.len(), store.len())));
        }
        for (slot, (name, shape, _, _)) in decls.iter().enumerate() {
            let info = store.info(slot);
            if &info.name != name || &info.shape != shape {
                return Err(ModelError::Format(format!(
                    "parameter {slot} is {} {:?}, expected {name} {shape:?}",
                    info.name, info.shape
                )));
            }
        }
        let s = |name: &str| store.slot(name).expect("declared");
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |x: &str| s(&format!("layer{l}.{x}"));
                LayerSlots {
                    ln1_g: p("ln1.gamma"),
                    ln1_b: p("ln1.beta"),
                    wq: p("attn.query.weight"),
                    bq: p("attn.query.bias"),
                    wk: p("attn.key.weight"),
                    bk: p("attn.key.bias"),
                    wv: p("attn.value.weight"),
                    bv: p("attn.value.bias"),
                    wo: p("attn.output.weight"),
                    bo: p("attn.output.bias"),
                    ln2_g: p("ln2.gamma"),
                    ln2_b: p("ln2.beta"),
                    w1: p("ffn.in.weight"),
                    b1: p("ffn.in.bias"),
                    w2: p("ffn.out.weight"),
                    b2: p("ffn.out.bias"),
                }
            })
            .collect();
        Ok(Layout {
            tok_emb: s("embeddings.token"),
            pos_emb: s("embeddings.position"),
            layers,
            lnf_g: s("final_ln.gamma"),
            lnf_b: s("final_ln.beta"),
            mlm_bias: s("mlm.bias"),
            cls_w: s("classifier.weight"),
            cls_b: s("classifier.bias"),
        })
    }
}

/// Softmax attention probabilities captured during a forward pass,
/// indexed `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub weights: Vec<f64>,
}

impl AttentionSummary {
    pub fn new(n_layers: usize, n_heads: usize, seq_len: usize, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), n_layers * n_heads * seq_len * seq_len);
        AttentionSummary { n_layers, n_heads, seq_len, weights }
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.weights[((layer * self.n_heads + head) * self.seq_len + query) * self.seq_len + key]
    }

    /// Attention row of one query.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let start = ((layer * self.n_heads + head) * self.seq_len + query) * self.seq_len;
        &self.weights[start..start + self.seq_len]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub seq_len: usize,
    /// Final hidden states, `[seq_len × hidden_dim]`.
    pub hidden: Vec<f64>,
    pub attention: Option<AttentionSummary>,
    /// Hidden state at the BOS position.
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Forward-pass mode. Dropout runs only in `Train`, drawing from the given generator.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut ChaCha8Rng),
}

/// A masked input plus `(position, original id)` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: TokenSequence,
    pub targets: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub input: TokenSequence,
    pub labels: Vec<f64>,
}

#[derive(Clone, Copy)]
pub enum TrainBatch<'a> {
    Mlm(&'a [MaskedSequence]),
    Multilabel(&'a [LabeledSequence]),
}

impl TrainBatch<'_> {
    fn len(&self) -> usize {
        match self {
            TrainBatch::Mlm(b) => b.len(),
            TrainBatch::Multilabel(b) => b.len(),
        }
    }
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    drop_scale: Option<Vec<f64>>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    b: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct SeqCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hidden: Vec<f64>,
}

fn pair_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

impl EncoderModel {
    /// Fresh weights: N(0, init_std) for matrices and embeddings, layer-norm
    /// scale 1 and offset 0, zero biases, zeroed PAD embedding row.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let mut params = ParameterStore::new();
        for (name, shape, init, decay) in declarations(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.push(name, shape, values, decay);
        }
        let layout = Layout::resolve(&config, &params)?;
        let d = config.hidden_dim;
        let pad = PAD as usize;
        params.value_mut(layout.tok_emb)[pad * d..(pad + 1) * d].fill(0.0);
        Ok(EncoderModel { config, params, layout })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(EncoderModel { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<(), ModelError> {
        let len = seq.len();
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len, max_len: self.config.max_len });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::InvalidToken { id, vocab_size: self.config.vocab_size });
        }
        if seq.ids.iter().all(|&id| id == PAD) {
            return Err(ModelError::EmptySequence);
        }
        Ok(())
    }

    fn forward_seq(&self, ids: &[u32], mode: &mut Mode<'_>) -> SeqCache {
        let cfg = &self.config;
        let p = &self.params;
        let (t, d, n_heads, dh) = (ids.len(), cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mask: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();

        let tok = p.value(self.layout.tok_emb);
        let pos = p.value(self.layout.pos_emb);
        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for c in 0..d {
                x[i * d + c] = tok[id * d + c] + pos[i * d + c];
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &self.layout.layers {
            let (a, ln1) = layer_norm(&x, p.value(slots.ln1_g), p.value(slots.ln1_b), t, d);
            let q = linear(&a, p.value(slots.wq), Some(p.value(slots.bq)), t, d, d);
            let k = linear(&a, p.value(slots.wk), Some(p.value(slots.bk)), t, d, d);
            let v = linear(&a, p.value(slots.wv), Some(p.value(slots.bv)), t, d, d);

            let mut probs = vec![0.0; n_heads * t * t];
            for h in 0..n_heads {
                for i in 0..t {
                    let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let mut scores: Vec<f64> = Vec::with_capacity(t);
                    for j in (0..t).filter(|&j| mask[j]) {
                        let mut s = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            s += q[i * d + c] * k[j * d + c];
                        }
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    for (j, pj) in (0..t).filter(|&j| mask[j]).zip(scores) {
                        row[j] = pj;
                    }
                }
            }

            let drop_scale = match mode {
                Mode::Train(rng) if cfg.attention_dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - cfg.attention_dropout);
                    Some(
                        (0..probs.len())
                            .map(|_| if rng.random::<f64>() < cfg.attention_dropout { 0.0 } else { keep })
                            .collect::<Vec<f64>>(),
                    )
                }
                _ => None,
            };

            let mut ctx = vec![0.0; t * d];
            for h in 0..n_heads {
                for i in 0..t {
                    for j in 0..t {
                        let idx = (h * t + i) * t + j;
                        let w = probs[idx] * drop_scale.as_ref().map_or(1.0, |s| s[idx]);
                        if w == 0.0 {
                            continue;
                        }
                        for c in h * dh..(h + 1) * dh {
                            ctx[i * d + c] += w * v[j * d + c];
                        }
                    }
                }
            }
            let o = linear(&ctx, p.value(slots.wo), Some(p.value(slots.bo)), t, d, d);
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }

            let (b, ln2) = layer_norm(&x, p.value(slots.ln2_g), p.value(slots.ln2_b), t, d);
            let u = linear(&b, p.value(slots.w1), Some(p.value(slots.b1)), t, d, cfg.ffn_dim);
            let g: Vec<f64> = u.iter().map(|&z| cfg.activation.apply(z)).collect();
            let f = linear(&g, p.value(slots.w2), Some(p.value(slots.b2)), t, cfg.ffn_dim, d);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            layers.push(LayerCache { ln1, a, q, k, v, probs, drop_scale, ctx, ln2, b, u, g });
        }
        let (hidden, lnf) = layer_norm(&x, p.value(self.layout.lnf_g), p.value(self.layout.lnf_b), t, d);
        SeqCache { ids: ids.to_vec(), layers, lnf, hidden }
    }

    fn classify_hidden(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        linear(
            &hidden[..d],
            self.params.value(self.layout.cls_w),
            Some(self.params.value(self.layout.cls_b)),
            1,
            d,
            self.config.n_labels,
        )
    }

    /// Runs the encoder on every sequence of `batch`. PAD keys are excluded from attention.
    pub fn forward(
        &self,
        batch: &[TokenSequence],
        capture_attention: bool,
        mut mode: Mode<'_>,
    ) -> Result<Vec<ForwardOutput>, ModelError> {
        for seq in batch {
            self.check_sequence(seq)?;
        }
        let d = self.config.hidden_dim;
        Ok(batch
            .iter()
            .map(|seq| {
                let cache = self.forward_seq(&seq.ids, &mut mode);
                let t = seq.len();
                let attention = capture_attention.then(|| {
                    let weights = cache.layers.iter().flat_map(|l| l.probs.iter().copied()).collect();
                    AttentionSummary::new(self.config.n_layers, self.config.n_heads, t, weights)
                });
                let logits = self.classify_hidden(&cache.hidden);
                let probabilities = logits.iter().map(|&z| sigmoid(z)).collect();
                ForwardOutput {
                    seq_len: t,
                    pooled: cache.hidden[..d].to_vec(),
                    hidden: cache.hidden,
                    attention,
                    logits,
                    probabilities,
                }
            })
            .collect())
    }

    /// Vocabulary logits at `positions` of a `[seq_len × hidden_dim]` hidden-state matrix.
    pub fn mlm_logits(&self, hidden: &[f64], seq_len: usize, positions: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        let d = self.config.hidden_dim;
        assert_eq!(hidden.len(), seq_len * d, "hidden states do not match seq_len");
        let emb = self.params.value(self.layout.tok_emb);
        let bias = self.params.value(self.layout.mlm_bias);
        positions
            .iter()
            .map(|&pos| {
                if pos >= seq_len {
                    return Err(ModelError::PositionOutOfRange { pos, len: seq_len });
                }
                let h = &hidden[pos * d..(pos + 1) * d];
                Ok((0..self.config.vocab_size)
                    .map(|v| bias[v] + emb[v * d..(v + 1) * d].iter().zip(h).map(|(e, x)| e * x).sum::<f64>())
                    .collect())
            })
            .collect()
    }

    /// Loss and gradients (written into the parameter store's gradient slots).
    pub fn loss_and_grad(&mut self, batch: TrainBatch<'_>, mode: Mode<'_>) -> Result<f64, ModelError> {
        self.params.zero_grad();
        let mut grads = self.params.take_grads();
        let result = self.objective(batch, mode, Some(&mut grads));
        self.params.restore_grads(grads);
        let loss = result?;
        if let Some(name) = self.params.first_non_finite_grad() {
            return Err(ModelError::Numeric { parameter: name.to_string() });
        }
        Ok(loss)
    }

    /// Loss only; parameters and gradient slots are left untouched.
    pub fn loss(&self, batch: TrainBatch<'_>, mode: Mode<'_>) -> Result<f64, ModelError> {
        self.objective(batch, mode, None)
    }

    fn objective(
        &self,
        batch: TrainBatch<'_>,
        mut mode: Mode<'_>,
        mut grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<f64, ModelError> {
        if batch.len() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let d = self.config.hidden_dim;
        let vocab = self.config.vocab_size;
        let mut total = 0.0;
        match batch {
            TrainBatch::Mlm(items) => {
                let n_targets: usize = items.iter().map(|m| m.targets.len()).sum();
                if n_targets == 0 {
                    return Err(ModelError::EmptyBatch);
                }
                for item in items {
                    self.check_sequence(&item.input)?;
                    for &(pos, id) in &item.targets {
                        if pos >= item.input.len() {
                            return Err(ModelError::PositionOutOfRange { pos, len: item.input.len() });
                        }
                        if id as usize >= vocab {
                            return Err(ModelError::InvalidToken { id, vocab_size: vocab });
                        }
                    }
                }
                let norm = match self.config.mlm_loss {
                    MlmLoss::CrossEntropy => n_targets as f64,
                    MlmLoss::Bce => (n_targets * vocab) as f64,
                };
                for item in items {
                    let cache = self.forward_seq(&item.input.ids, &mut mode);
                    let t = item.input.len();
                    let positions: Vec<usize> = item.targets.iter().map(|&(p, _)| p).collect();
                    let logits = self.mlm_logits(&cache.hidden, t, &positions)?;
                    let mut dhidden = grads.is_some().then(|| vec![0.0; t * d]);
                    for ((pos, target), mut z) in item.targets.iter().copied().zip(logits) {
                        let target = target as usize;
                        match self.config.mlm_loss {
                            MlmLoss::CrossEntropy => {
                                let zt = z[target];
                                let lse = softmax_in_place(&mut z);
                                total += lse - zt;
                                z[target] -= 1.0;
                            }
                            MlmLoss::Bce => {
                                for (v, zv) in z.iter_mut().enumerate() {
                                    let y = if v == target { 1.0 } else { 0.0 };
                                    total += bce_with_logits(*zv, y);
                                    *zv = sigmoid(*zv) - y;
                                }
                            }
                        }
                        if let (Some(g), Some(dh)) = (grads.as_deref_mut(), dhidden.as_mut()) {
                            // z now holds dLoss/dlogits * norm
                            let h = &cache.hidden[pos * d..(pos + 1) * d];
                            let emb = self.params.value(self.layout.tok_emb);
                            let (demb, dbias) = pair_mut(g, self.layout.tok_emb, self.layout.mlm_bias);
                            for v in 0..vocab {
                                let dz = z[v] / norm;
                                dbias[v] += dz;
                                for c in 0..d {
                                    demb[v * d + c] += dz * h[c];
                                    dh[pos * d + c] += dz * emb[v * d + c];
                                }
                            }
                        }
                    }
                    if let (Some(g), Some(dh)) = (grads.as_deref_mut(), dhidden) {
                        self.backward_seq(&cache, dh, g);
                    }
                }
                Ok(total / norm)
            }
            TrainBatch::Multilabel(items) => {
                let k = self.config.n_labels;
                for item in items {
                    self.check_sequence(&item.input)?;
                    if item.labels.len() != k {
                        return Err(ModelError::LabelMismatch { expected: k, found: item.labels.len() });
                    }
                }
                let norm = (items.len() * k) as f64;
                for item in items {
                    let cache = self.forward_seq(&item.input.ids, &mut mode);
                    let logits = self.classify_hidden(&cache.hidden);
                    let mut dz = vec![0.0; k];
                    for j in 0..k {
                        total += bce_with_logits(logits[j], item.labels[j]);
                        dz[j] = (sigmoid(logits[j]) - item.labels[j]) / norm;
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        let t = item.input.len();
                        let pooled = &cache.hidden[..d];
                        let w = self.params.value(self.layout.cls_w);
                        let (dw, db) = pair_mut(g, self.layout.cls_w, self.layout.cls_b);
                        let dpooled = linear_backward(pooled, w, &dz, dw, Some(db), 1, d, k);
                        let mut dh = vec![0.0; t * d];
                        dh[..d].copy_from_slice(&dpooled);
                        self.backward_seq(&cache, dh, g);
                    }
                }
                let loss = total / norm;
                if !loss.is_finite() {
                    return Err(ModelError::Numeric { parameter: "loss".into() });
                }
                Ok(loss)
            }
        }
        .and_then(|loss: f64| {
            if loss.is_finite() {
                Ok(loss)
            } else {
                Err(ModelError::Numeric { parameter: "loss".into() })
            }
        })
    }

    fn backward_seq(&self, cache: &SeqCache, dhidden: Vec<f64>, grads: &mut [Vec<f64>]) {
        let cfg = &self.config;
        let p = &self.params;
        let (t, d, n_heads, dh, f) = (cache.ids.len(), cfg.hidden_dim, cfg.n_heads, cfg.head_dim(), cfg.ffn_dim);
        let scale = 1.0 / (dh as f64).sqrt();

        let (dg, db) = pair_mut(grads, self.layout.lnf_g, self.layout.lnf_b);
        let mut dx = layer_norm_backward(&dhidden, p.value(self.layout.lnf_g), &cache.lnf, dg, db, t, d);

        for (slots, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            // feed-forward sub-block; dx flows through the residual unchanged
            let (dw2, db2) = pair_mut(grads, slots.w2, slots.b2);
            let dgelu = linear_backward(&lc.g, p.value(slots.w2), &dx, dw2, Some(db2), t, f, d);
            let du: Vec<f64> = dgelu.iter().zip(&lc.u).map(|(g, &u)| g * cfg.activation.derivative(u)).collect();
            let (dw1, db1) = pair_mut(grads, slots.w1, slots.b1);
            let dbn = linear_backward(&lc.b, p.value(slots.w1), &du, dw1, Some(db1), t, d, f);
            let (dg2, db2n) = pair_mut(grads, slots.ln2_g, slots.ln2_b);
            let dres = layer_norm_backward(&dbn, p.value(slots.ln2_g), &lc.ln2, dg2, db2n, t, d);
            for (a, b) in dx.iter_mut().zip(&dres) {
                *a += b;
            }

            // attention sub-block
            let (dwo, dbo) = pair_mut(grads, slots.wo, slots.bo);
            let dctx = linear_backward(&lc.ctx, p.value(slots.wo), &dx, dwo, Some(dbo), t, d, d);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = vec![0.0; t];
            for h in 0..n_heads {
                for i in 0..t {
                    let base = (h * t + i) * t;
                    for j in 0..t {
                        let idx = base + j;
                        if lc.probs[idx] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let s = lc.drop_scale.as_ref().map_or(1.0, |s| s[idx]);
                        let w = lc.probs[idx] * s;
                        let mut acc = 0.0;
                        for c in h * dh..(h + 1) * dh {
                            acc += dctx[i * d + c] * lc.v[j * d + c];
                            dv[j * d + c] += w * dctx[i * d + c];
                        }
                        dp[j] = acc * s;
                    }
                    let row = &lc.probs[base..base + t];
                    let dot: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..t {
                        if row[j] == 0.0 {
                            continue;
                        }
                        let ds = row[j] * (dp[j] - dot) * scale;
                        for c in h * dh..(h + 1) * dh {
                            dq[i * d + c] += ds * lc.k[j * d + c];
                            dk[j * d + c] += ds * lc.q[i * d + c];
                        }
                    }
                }
            }
            let (dwq, dbq) = pair_mut(grads, slots.wq, slots.bq);
            let mut da = linear_backward(&lc.a, p.value(slots.wq), &dq, dwq, Some(dbq), t, d, d);
            let (dwk, dbk) = pair_mut(grads, slots.wk, slots.bk);
            let da_k = linear_backward(&lc.a, p.value(slots.wk), &dk, dwk, Some(dbk), t, d, d);
            let (dwv, dbv) = pair_mut(grads, slots.wv, slots.bv);
            let da_v = linear_backward(&lc.a, p.value(slots.wv), &dv, dwv, Some(dbv), t, d, d);
            for ((a, b), c) in da.iter_mut().zip(&da_k).zip(&da_v) {
                *a += b + c;
            }
            let (dg1, db1n) = pair_mut(grads, slots.ln1_g, slots.ln1_b);
            let dres = layer_norm_backward(&da, p.value(slots.ln1_g), &lc.ln1, dg1, db1n, t, d);
            for (a, b) in dx.iter_mut().zip(&dres) {
                *a += b;
            }
        }

        let (dtok, dpos) = pair_mut(grads, self.layout.tok_emb, self.layout.pos_emb);
        for (i, &id) in cache.ids.iter().enumerate() {
            let id = id as usize;
            for c in 0..d {
                dtok[id * d + c] += dx[i * d + c];
                dpos[i * d + c] += dx[i * d + c];
            }
        }
    }
}
