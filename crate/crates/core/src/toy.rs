//! Synthetic motif ontology for smoke tests and demos.
//!
//! Sixteen motifs (halogens, metals, nonmetals) each get a class; pairs of
//! motifs get combination classes; every leaf is a SMILES-like string built
//! from carbon filler with one to three motifs inserted, filed under the
//! classes of the motifs it contains. Label membership is therefore a pure
//! function of which motifs occur in the string.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::fsutil::write_atomic;
use crate::model::ModelConfig;
use crate::ontology::{ClassId, OntologyClass, OntologyGraph};

pub const GROUPS: [(&str, [&str; 4]); 4] = [
    ("halogen", ["Br", "Cl", "F", "I"]),
    ("transition metal", ["[Co]", "[Cu]", "[Zn]", "[Au]"]),
    ("other metal", ["[Mg]", "[Li+]", "[K+]", "[Hg]"]),
    ("nonmetal", ["S", "P", "N", "O"]),
];

const FILLERS: [&str; 6] = ["C", "CC", "C(C)", "c1ccccc1", "C=C", "CCC"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub n_leaves: usize,
    pub n_pair_classes: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { n_leaves: 400, n_pair_classes: 40, seed: 0 }
    }
}

fn id(n: usize) -> ClassId {
    ClassId::new(format!("TOY:{n:07}")).expect("valid id")
}

pub fn motifs() -> Vec<&'static str> {
    GROUPS.iter().flat_map(|(_, m)| m.iter().copied()).collect()
}

/// One SMILES-like string containing exactly the given motifs.
fn molecule(motif_set: &[&str], rng: &mut ChaCha8Rng) -> String {
    let n_fill = rng.random_range(2..=5);
    let mut parts: Vec<&str> = (0..n_fill).map(|_| *FILLERS.choose(rng).expect("fillers")).collect();
    for m in motif_set {
        let at = rng.random_range(1..=parts.len());
        parts.insert(at, m);
    }
    parts.concat()
}

/// Builds the toy ontology: root, 4 groups, 16 motif classes, pair classes and leaves.
pub fn toy_ontology(config: &ToyConfig) -> OntologyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut classes = Vec::new();
    let mut next = 1;
    let mut fresh = || {
        let i = id(next);
        next += 1;
        i
    };
    let root = fresh();
    classes.push(OntologyClass::new(root.clone(), "toy entity"));
    let mut motif_class: BTreeMap<&str, ClassId> = BTreeMap::new();
    for (group, members) in GROUPS {
        let g = fresh();
        classes.push(OntologyClass::new(g.clone(), format!("{group} compound")).with_parents([root.clone()]));
        for m in members {
            let c = fresh();
            classes.push(OntologyClass::new(c.clone(), format!("{m} compound")).with_parents([g.clone()]));
            motif_class.insert(m, c);
        }
    }
    let all = motifs();
    let mut pairs: Vec<(&str, &str)> =
        all.iter().enumerate().flat_map(|(i, a)| all[i + 1..].iter().map(move |b| (*a, *b))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(config.n_pair_classes);
    pairs.sort_unstable();
    let mut pair_class: BTreeMap<(&str, &str), ClassId> = BTreeMap::new();
    for &(a, b) in &pairs {
        let c = fresh();
        classes.push(
            OntologyClass::new(c.clone(), format!("{a} {b} compound"))
                .with_parents([motif_class[a].clone(), motif_class[b].clone()]),
        );
        pair_class.insert((a, b), c);
    }
    let mut seen = BTreeSet::new();
    while seen.len() < config.n_leaves {
        let k = rng.random_range(1..=3);
        let mut chosen: Vec<&str> = all.choose_multiple(&mut rng, k).copied().collect();
        chosen.sort_unstable();
        let smiles = molecule(&chosen, &mut rng);
        if !seen.insert(smiles.clone()) {
            continue;
        }
        let mut parents = BTreeSet::new();
        let mut covered = BTreeSet::new();
        for (i, a) in chosen.iter().enumerate() {
            for b in &chosen[i + 1..] {
                if let Some(c) = pair_class.get(&(*a, *b)) {
                    parents.insert(c.clone());
                    covered.insert(*a);
                    covered.insert(*b);
                }
            }
        }
        for m in &chosen {
            if !covered.contains(m) {
                parents.insert(motif_class[m].clone());
            }
        }
        let leaf = fresh();
        let name = format!("toy molecule {}", seen.len());
        classes.push(OntologyClass::new(leaf, name).with_smiles(smiles).with_parents(parents));
    }
    OntologyGraph::from_classes(classes).expect("toy ontology is a valid DAG")
}

/// `n` SMILES-like strings drawn like toy leaves.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = motifs();
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=3);
            let chosen: Vec<&str> = all.choose_multiple(&mut rng, k).copied().collect();
            molecule(&chosen, &mut rng)
        })
        .collect()
}

/// Small encoder suited to the toy data.
pub fn toy_model_config(vocab_size: usize, n_labels: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        hidden_dim: 32,
        ffn_dim: 64,
        vocab_size,
        max_len: 64,
        n_labels,
        seed,
        ..ModelConfig::default()
    }
}

pub const TOY_LABELS: usize = 12;
pub const TOY_VOCAB: usize = 40;
pub const TOY_EXTRA_CORPUS: usize = 2000;

/// Run configuration for the toy workspace rooted at `dir`: the small model,
/// 30 pretraining and 100 fine-tuning epochs at learning rate 1e-3.
pub fn toy_run_config(dir: &Path, seed: u64) -> RunConfig {
    let mut c = RunConfig { seed: Some(seed), ..RunConfig::default() };
    let at = |name: &str| Some(dir.join(name));
    c.paths.ontology = at("toy.obo");
    c.paths.dataset = at("data");
    c.paths.tokenizer = at("tokenizer.txt");
    c.paths.pretrained_model = at("pretrained.bin");
    c.paths.model = at("model.bin");
    c.paths.pretrain_corpus = at("unlabeled.smi");
    c.paths.input = at("input.smi");
    c.paths.output = at("out");
    c.paths.extended_ontology = at("extended.obo");
    c.dataset.n_labels = TOY_LABELS;
    c.tokenizer.vocab_size = TOY_VOCAB;
    let m = toy_model_config(0, 0, 0);
    c.model.n_layers = m.n_layers;
    c.model.n_heads = m.n_heads;
    c.model.hidden_dim = m.hidden_dim;
    c.model.ffn_dim = m.ffn_dim;
    c.model.max_len = m.max_len;
    c.pretrain.epochs = 30;
    c.finetune.epochs = 100;
    c.pretrain.learning_rate = 1e-3;
    c.finetune.learning_rate = 1e-3;
    c
}

/// Writes the toy ontology, an unlabeled pretraining corpus, a few unseen
/// inputs and `run.toml` into `dir`. Returns the config file path.
pub fn write_toy_workspace(dir: &Path, seed: u64) -> io::Result<PathBuf> {
    let graph = toy_ontology(&ToyConfig { seed, ..ToyConfig::default() });
    write_atomic(&dir.join("toy.obo"), graph.to_obo().as_bytes())?;
    let lines = |v: Vec<String>| v.into_iter().map(|s| s + "\n").collect::<String>();
    write_atomic(&dir.join("unlabeled.smi"), lines(toy_corpus(TOY_EXTRA_CORPUS, seed ^ 0x5eed)).as_bytes())?;
    write_atomic(&dir.join("input.smi"), lines(toy_corpus(8, seed ^ 0x1234)).as_bytes())?;
    let config = toy_run_config(Path::new(""), seed);
    let path = dir.join("run.toml");
    write_atomic(&path, config.to_toml().as_bytes())?;
    Ok(path)
}
