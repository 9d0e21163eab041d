//! Character-level byte-pair encoding over SMILES strings.
//!
//! Every SMILES string is a single word: no pre-splitting on whitespace or
//! atoms. The base alphabet is the set of characters seen in the training
//! corpus; merges are learned by descending adjacent-pair frequency with
//! lexicographic tie-breaking on the (left, right) token strings.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsutil::write_atomic;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];
pub const NUM_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

pub const DEFAULT_MAX_LEN: usize = 512;
pub const DEFAULT_MIN_FREQUENCY: u64 = 2;
pub const DEFAULT_VOCAB_SIZE: usize = 1395;

const FORMAT_NAME: &str = "ontoext-bpe-tokenizer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocabulary {target} is smaller than the {minimum} base tokens (alphabet + reserved)")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("character {0:?} cannot be part of the vocabulary")]
    InvalidCharacter(char),
    #[error("cannot encode an empty string")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("max_len {0} leaves no room for BOS and EOS")]
    MaxLenTooSmall(usize),
    #[error("token id {0} is not in the vocabulary")]
    InvalidId(u32),
    #[error("tokenizer file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported tokenizer format {found:?} (expected {FORMAT_NAME} v{FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for t in SPECIAL_TOKENS {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.ids.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Merge rules in training order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    pub rules: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Token ids framed by BOS and EOS, optionally followed by PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        TokenSequence { ids }
    }
}

pub fn is_special(id: u32) -> bool {
    id == PAD || id == BOS || id == EOS
}

#[derive(Debug, Clone, Copy)]
pub struct BpeConfig {
    pub target_vocab: usize,
    pub min_frequency: u64,
}

impl Default for BpeConfig {
    fn default() -> Self {
        BpeConfig { target_vocab: DEFAULT_VOCAB_SIZE, min_frequency: DEFAULT_MIN_FREQUENCY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    /// Set when the sequence contained UNK or MASK, so `text` is not the original input.
    pub lossy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    ranks: HashMap<(u32, u32), (usize, u32)>,
    chars: HashMap<char, u32>,
}

impl Tokenizer {
    fn from_parts(vocab: Vocabulary, merges: MergeTable) -> Result<Self, TokenizerError> {
        let mut chars = HashMap::new();
        for (id, token) in vocab.tokens.iter().enumerate().skip(NUM_SPECIAL as usize) {
            let mut it = token.chars();
            if let (Some(c), None) = (it.next(), it.next()) {
                chars.insert(c, id as u32);
            }
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.rules.iter().enumerate() {
            let missing = |t: &str| TokenizerError::Format { line: 0, message: format!("merge refers to unknown token {t:?}") };
            let lid = vocab.id(l).ok_or_else(|| missing(l))?;
            let rid = vocab.id(r).ok_or_else(|| missing(r))?;
            let merged = format!("{l}{r}");
            let mid = vocab.id(&merged).ok_or_else(|| missing(&merged))?;
            ranks.entry((lid, rid)).or_insert((rank, mid));
        }
        Ok(Tokenizer { vocab, merges, ranks, chars })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    /// Tokens for `s` without BOS/EOS.
    pub fn tokenize(&self, s: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = s.chars().map(|c| self.chars.get(&c).copied().unwrap_or(UNK)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, w[0], w[1], merged)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else { break };
            ids = merge_pair(&ids, left, right, merged);
        }
        ids
    }

    /// Encodes with BOS/EOS; fails if the framed sequence exceeds `max_len`.
    pub fn encode(&self, s: &str, max_len: usize) -> Result<TokenSequence, TokenizerError> {
        if s.is_empty() {
            return Err(TokenizerError::EmptyInput);
        }
        let body = self.tokenize(s);
        let len = body.len() + 2;
        if len > max_len {
            return Err(TokenizerError::TooLong { len, max_len });
        }
        Ok(frame(body))
    }

    /// Inference-time variant: over-long input is cut to `max_len` (EOS kept) and flagged.
    pub fn encode_truncated(&self, s: &str, max_len: usize) -> Result<(TokenSequence, bool), TokenizerError> {
        if s.is_empty() {
            return Err(TokenizerError::EmptyInput);
        }
        if max_len < 3 {
            return Err(TokenizerError::MaxLenTooSmall(max_len));
        }
        let mut body = self.tokenize(s);
        let truncated = body.len() + 2 > max_len;
        if truncated {
            log::warn!("truncating {s:?} from {} to {max_len} tokens", body.len() + 2);
            body.truncate(max_len - 2);
        }
        Ok((frame(body), truncated))
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<Decoded, TokenizerError> {
        let mut text = String::new();
        let mut lossy = false;
        for &id in &seq.ids {
            let token = self.vocab.token(id).ok_or(TokenizerError::InvalidId(id))?;
            match id {
                PAD | BOS | EOS => {}
                UNK | MASK => {
                    lossy = true;
                    text.push_str(token);
                }
                _ => text.push_str(token),
            }
        }
        Ok(Decoded { text, lossy })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_NAME} v{FORMAT_VERSION}\nvocab {}\n", self.vocab.len());
        for (id, token) in self.vocab.tokens.iter().enumerate() {
            let _ = writeln!(out, "{id}\t{token}");
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for (l, r) in &self.merges.rules {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: String| TokenizerError::Format { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        if header != format!("{FORMAT_NAME} v{FORMAT_VERSION}") {
            return Err(TokenizerError::VersionMismatch { found: header.to_string() });
        }
        let count = |lines: &mut dyn Iterator<Item = (usize, &str)>, key: &str| -> Result<usize, TokenizerError> {
            let (n, line) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` section")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| err(n, format!("expected `{key} <count>`")))
        };
        let n_vocab = count(&mut lines, "vocab")?;
        let mut vocab = Vocabulary { tokens: Vec::with_capacity(n_vocab), ids: HashMap::new() };
        for expected in 0..n_vocab {
            let (n, line) = lines.next().ok_or_else(|| err(0, "truncated vocabulary".into()))?;
            let (id, token) = line.split_once('\t').ok_or_else(|| err(n, "expected id<TAB>token".into()))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(err(n, format!("vocabulary ids must be contiguous; expected {expected}")));
            }
            if token.is_empty() || vocab.ids.contains_key(token) {
                return Err(err(n, format!("empty or duplicate token {token:?}")));
            }
            vocab.push(token.to_string());
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(err(0, format!("reserved id {i} must be {special}")));
            }
        }
        let n_merges = count(&mut lines, "merges")?;
        let mut merges = MergeTable::default();
        for _ in 0..n_merges {
            let (n, line) = lines.next().ok_or_else(|| err(0, "truncated merge table".into()))?;
            let (l, r) = line.split_once('\t').ok_or_else(|| err(n, "expected left<TAB>right".into()))?;
            merges.rules.push((l.to_string(), r.to_string()));
        }
        if let Some((n, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(err(n, format!("unexpected trailing content {extra:?}")));
        }
        Self::from_parts(vocab, merges)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        write_atomic(path, self.to_text().as_bytes()).map_err(|source| TokenizerError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| TokenizerError::Io { path: path.into(), source })?;
        Self::from_text(&text)
    }
}

fn frame(body: Vec<u32>) -> TokenSequence {
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(BOS);
    ids.extend(body);
    ids.push(EOS);
    TokenSequence { ids }
}

/// Replaces every non-overlapping (left, right) occurrence, scanning left to right.
fn merge_pair(ids: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

fn add_pairs(ids: &[u32], weight: i64, word: usize, counts: &mut HashMap<(u32, u32), i64>, seen_in: &mut HashMap<(u32, u32), HashSet<usize>>) {
    for w in ids.windows(2) {
        let pair = (w[0], w[1]);
        *counts.entry(pair).or_insert(0) += weight;
        if weight > 0 {
            seen_in.entry(pair).or_default().insert(word);
        }
    }
}

/// Learns a vocabulary and merge table from `corpus`.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], config: BpeConfig) -> Result<Tokenizer, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut alphabet = BTreeSet::new();
    for s in corpus {
        for c in s.as_ref().chars() {
            if c.is_whitespace() || c.is_control() {
                return Err(TokenizerError::InvalidCharacter(c));
            }
            alphabet.insert(c);
        }
    }
    let minimum = alphabet.len() + NUM_SPECIAL as usize;
    if config.target_vocab < minimum {
        return Err(TokenizerError::VocabTooSmall { target: config.target_vocab, minimum });
    }

    let mut vocab = Vocabulary::with_specials();
    let char_ids: HashMap<char, u32> = alphabet.iter().map(|&c| (c, vocab.push(c.to_string()))).collect();

    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for s in corpus {
        *word_counts.entry(s.as_ref()).or_insert(0) += 1;
    }
    let mut distinct: Vec<(&str, i64)> = word_counts.into_iter().collect();
    distinct.sort_unstable();
    let mut words: Vec<Vec<u32>> = distinct.iter().map(|(w, _)| w.chars().map(|c| char_ids[&c]).collect()).collect();
    let weights: Vec<i64> = distinct.iter().map(|&(_, n)| n).collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut seen_in: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (i, w) in words.iter().enumerate() {
        add_pairs(w, weights[i], i, &mut counts, &mut seen_in);
    }

    let mut merges = MergeTable::default();
    while vocab.len() < config.target_vocab {
        let best = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb).then_with(|| {
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, &n)| (p, n));
        let Some(((left, right), freq)) = best else { break };
        if (freq as u64) < config.min_frequency {
            break;
        }
        let l = vocab.tokens[left as usize].clone();
        let r = vocab.tokens[right as usize].clone();
        let merged = vocab.push(format!("{l}{r}"));
        merges.rules.push((l, r));

        let mut affected: Vec<usize> = seen_in.remove(&(left, right)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            add_pairs(&words[wi], -weights[wi], wi, &mut counts, &mut seen_in);
            words[wi] = merge_pair(&words[wi], left, right, merged);
            add_pairs(&words[wi], weights[wi], wi, &mut counts, &mut seen_in);
        }
        counts.retain(|_, n| *n > 0);
    }
    Tokenizer::from_parts(vocab, merges)
}
