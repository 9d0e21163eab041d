//! Multi-label datasets derived from an ontology: label-class selection,
//! per-leaf label vectors, seeded splits and the TSV exchange format.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::ontology::{ClassId, OntologyError, OntologyGraph};

pub const DEFAULT_MIN_MEMBERS: usize = 20;
/// Number of seeded greedy restarts tried by [`select_label_classes`].
pub const SELECTION_RESTARTS: usize = 8;

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALIDATION_FILE: &str = "validation.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const LABELS_FILE: &str = "labels.txt";
/// Reference (train, validation, test) molecule counts; default ratios derive from these.
pub const REFERENCE_SPLIT_COUNTS: [usize; 3] = [21_896, 2_815, 6_569];

pub fn default_split_ratios() -> [f64; 3] {
    let n: usize = REFERENCE_SPLIT_COUNTS.iter().sum();
    REFERENCE_SPLIT_COUNTS.map(|c| c as f64 / n as f64)
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need {needed} label classes but only {found} have at least {min_members} structured members")]
    NotEnoughCandidates { needed: usize, found: usize, min_members: usize },
    #[error("label class count must be at least 1")]
    ZeroLabels,
    #[error("duplicate label class {0}")]
    DuplicateLabel(ClassId),
    #[error("label class {0} is not in the ontology")]
    UnknownLabel(ClassId),
    #[error("no structured leaf belongs to any label class")]
    Empty,
    #[error("invalid split ratios {0:?}: each must be positive and they must sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("dataset of {0} molecules is too small to split three ways")]
    TooSmall(usize),
    #[error("{}:{line}: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{}: expected {expected} label columns, found {found}", path.display())]
    LabelCountMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

/// Ordered label columns. Column meaning is fixed once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelIndex {
    classes: Vec<ClassId>,
    index: HashMap<ClassId, usize>,
}

impl LabelIndex {
    pub fn new(classes: Vec<ClassId>) -> Result<Self, DatasetError> {
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(DatasetError::DuplicateLabel(c.clone()));
            }
        }
        Ok(LabelIndex { classes, index })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class(&self, column: usize) -> &ClassId {
        &self.classes[column]
    }

    pub fn column(&self, class: &ClassId) -> Option<usize> {
        self.index.get(class).copied()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// `labels.txt` form: one id per line, in column order.
    pub fn to_text(&self) -> String {
        self.classes.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, DatasetError> {
        let classes = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(ClassId::new)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(classes)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledMolecule {
    pub smiles: String,
    pub labels: Vec<bool>,
}

impl LabeledMolecule {
    pub fn label_count(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }

    pub fn label_vector(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    /// Members per label class, in column order.
    pub class_counts: Vec<(ClassId, usize)>,
    /// number of labels -> number of molecules carrying that many labels
    pub labels_per_molecule: BTreeMap<usize, usize>,
}

impl DatasetStats {
    pub fn compute(labels: &LabelIndex, data: &[LabeledMolecule]) -> Self {
        let mut counts = vec![0usize; labels.len()];
        let mut histogram = BTreeMap::new();
        for m in data {
            for (j, &b) in m.labels.iter().enumerate() {
                counts[j] += b as usize;
            }
            *histogram.entry(m.label_count()).or_insert(0) += 1;
        }
        DatasetStats {
            class_counts: labels.classes().iter().cloned().zip(counts).collect(),
            labels_per_molecule: histogram,
        }
    }

    pub fn molecule_count(&self) -> usize {
        self.labels_per_molecule.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub labels: LabelIndex,
    pub train: Vec<LabeledMolecule>,
    pub validation: Vec<LabeledMolecule>,
    pub test: Vec<LabeledMolecule>,
    /// Seed used by [`split_dataset`]; not stored in the TSV files.
    pub seed: Option<u64>,
}

impl DatasetSplits {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledMolecule> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Structured-leaf descendants of every non-leaf, non-obsolete class, as sorted leaf indices.
fn leaf_descendants(graph: &OntologyGraph, leaves: &[ClassId]) -> Result<BTreeMap<ClassId, Vec<u32>>, DatasetError> {
    let mut members: BTreeMap<ClassId, Vec<u32>> = BTreeMap::new();
    for (i, leaf) in leaves.iter().enumerate() {
        for anc in graph.ancestors(leaf)? {
            members.entry(anc).or_default().push(i as u32);
        }
    }
    members.retain(|id, _| graph.get(id).is_some_and(|c| !c.obsolete));
    Ok(members)
}

/// Greedily picks `k` label classes whose structured-leaf memberships overlap as
/// little as possible.
///
/// Candidates are non-leaf classes with at least `min_members` structured leaf
/// descendants. From each of several seeded starting classes, the candidate with
/// the smallest Jaccard overlap against the union of already chosen members is
/// added next (ties by id). The run with the smallest summed pairwise member
/// overlap wins; ties go to the earlier start.
pub fn select_label_classes(
    graph: &OntologyGraph,
    k: usize,
    min_members: usize,
    seed: u64,
) -> Result<LabelIndex, DatasetError> {
    if k == 0 {
        return Err(DatasetError::ZeroLabels);
    }
    let leaves: Vec<ClassId> = graph.structured_leaves().into_iter().collect();
    let members = leaf_descendants(graph, &leaves)?;
    let candidates: Vec<(ClassId, Vec<u32>)> =
        members.into_iter().filter(|(_, m)| m.len() >= min_members.max(1)).collect();
    if candidates.len() < k {
        return Err(DatasetError::NotEnoughCandidates { needed: k, found: candidates.len(), min_members });
    }
    if candidates.len() == k {
        return LabelIndex::new(candidates.into_iter().map(|(c, _)| c).collect());
    }

    // leaf -> candidate indices containing it
    let mut containing: Vec<Vec<usize>> = vec![Vec::new(); leaves.len()];
    for (ci, (_, m)) in candidates.iter().enumerate() {
        for &leaf in m {
            containing[leaf as usize].push(ci);
        }
    }

    let mut starts: Vec<usize> = (0..candidates.len()).collect();
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    starts.truncate(SELECTION_RESTARTS);

    let mut best: Option<(u64, Vec<usize>)> = None;
    for start in starts {
        let chosen = greedy_from(start, k, &candidates, &containing, leaves.len());
        let mut cover = vec![0u64; leaves.len()];
        for &c in &chosen {
            for &leaf in &candidates[c].1 {
                cover[leaf as usize] += 1;
            }
        }
        let overlap: u64 = cover.iter().map(|&m| m * m.saturating_sub(1) / 2).sum();
        if best.as_ref().map_or(true, |(b, _)| overlap < *b) {
            best = Some((overlap, chosen));
        }
    }
    let (_, mut chosen) = best.expect("at least one start");
    chosen.sort_unstable();
    LabelIndex::new(chosen.into_iter().map(|c| candidates[c].0.clone()).collect())
}

fn greedy_from(
    start: usize,
    k: usize,
    candidates: &[(ClassId, Vec<u32>)],
    containing: &[Vec<usize>],
    n_leaves: usize,
) -> Vec<usize> {
    let mut in_union = vec![false; n_leaves];
    let mut union_size = 0usize;
    // overlap[c] = |members(c) ∩ union|
    let mut overlap = vec![0usize; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let mut chosen = Vec::with_capacity(k);

    let mut add = |c: usize, chosen: &mut Vec<usize>, taken: &mut Vec<bool>, overlap: &mut Vec<usize>| {
        chosen.push(c);
        taken[c] = true;
        for &leaf in &candidates[c].1 {
            if !in_union[leaf as usize] {
                in_union[leaf as usize] = true;
                union_size += 1;
                for &other in &containing[leaf as usize] {
                    overlap[other] += 1;
                }
            }
        }
        union_size
    };

    let mut size = add(start, &mut chosen, &mut taken, &mut overlap);
    while chosen.len() < k {
        let mut pick: Option<(usize, f64)> = None;
        for (c, (_, m)) in candidates.iter().enumerate() {
            if taken[c] {
                continue;
            }
            let inter = overlap[c] as f64;
            let jaccard = inter / (m.len() + size - overlap[c]) as f64;
            if pick.map_or(true, |(_, j)| jaccard < j) {
                pick = Some((c, jaccard));
            }
        }
        let (c, _) = pick.expect("more candidates than k");
        size = add(c, &mut chosen, &mut taken, &mut overlap);
    }
    chosen
}

/// One labeled molecule per structured leaf with at least one label-class
/// ancestor. Leaves sharing a SMILES string are merged (labels OR-ed).
pub fn build_dataset(
    graph: &OntologyGraph,
    labels: &LabelIndex,
) -> Result<(Vec<LabeledMolecule>, DatasetStats), DatasetError> {
    for class in labels.classes() {
        if !graph.contains(class) {
            return Err(DatasetError::UnknownLabel(class.clone()));
        }
    }
    let mut data: Vec<LabeledMolecule> = Vec::new();
    let mut by_smiles: HashMap<String, usize> = HashMap::new();
    for leaf in graph.structured_leaves() {
        let ancestors = graph.ancestors(&leaf)?;
        let row: Vec<bool> = labels.classes().iter().map(|c| ancestors.contains(c)).collect();
        if !row.iter().any(|&b| b) {
            continue;
        }
        let smiles = graph.get(&leaf).and_then(|c| c.smiles.clone()).expect("structured leaf has SMILES");
        match by_smiles.get(&smiles) {
            Some(&i) => {
                for (dst, src) in data[i].labels.iter_mut().zip(row) {
                    *dst |= src;
                }
            }
            None => {
                by_smiles.insert(smiles.clone(), data.len());
                data.push(LabeledMolecule { smiles, labels: row });
            }
        }
    }
    if data.is_empty() {
        return Err(DatasetError::Empty);
    }
    let stats = DatasetStats::compute(labels, &data);
    Ok((data, stats))
}

/// Split sizes by largest-remainder rounding of `ratios * n`.
/// Remainder ties go to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Seeded uniform shuffle followed by a (train, validation, test) cut.
pub fn split_dataset(
    labels: &LabelIndex,
    data: &[LabeledMolecule],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplits, DatasetError> {
    let n = data.len();
    if n < 3 {
        return Err(DatasetError::TooSmall(n));
    }
    let [n_train, n_val, _] = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplits {
        labels: labels.clone(),
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
        seed: Some(seed),
    })
}

pub fn to_tsv(labels: &LabelIndex, rows: &[LabeledMolecule]) -> String {
    let mut out = String::from("smiles");
    for c in labels.classes() {
        out.push('\t');
        out.push_str(c.as_str());
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.smiles);
        for &b in &row.labels {
            out.push_str(if b { "\t1" } else { "\t0" });
        }
        out.push('\n');
    }
    out
}

/// Parses one split file; the header must name the same label columns as `labels`.
pub fn parse_tsv(path: &Path, text: &str, labels: &LabelIndex) -> Result<Vec<LabeledMolecule>, DatasetError> {
    let malformed = |line: usize, message: String| DatasetError::Malformed { path: path.into(), line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header".into()))?;
    let mut columns = header.trim_end_matches('\r').split('\t');
    if columns.next() != Some("smiles") {
        return Err(malformed(1, "header must start with `smiles`".into()));
    }
    let header_labels: Vec<&str> = columns.collect();
    if header_labels.len() != labels.len() {
        return Err(DatasetError::LabelCountMismatch { path: path.into(), expected: labels.len(), found: header_labels.len() });
    }
    for (j, name) in header_labels.iter().enumerate() {
        if *name != labels.class(j).as_str() {
            return Err(malformed(1, format!("label column {} is {name}, expected {}", j + 1, labels.class(j))));
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != labels.len() + 1 {
            return Err(malformed(lineno, format!("expected {} columns, found {}", labels.len() + 1, fields.len())));
        }
        if fields[0].is_empty() {
            return Err(malformed(lineno, "empty SMILES".into()));
        }
        let bits = fields[1..]
            .iter()
            .map(|f| match *f {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(malformed(lineno, format!("label value must be 0 or 1, found {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !bits.iter().any(|&b| b) {
            return Err(malformed(lineno, "molecule has no label set".into()));
        }
        rows.push(LabeledMolecule { smiles: fields[0].to_string(), labels: bits });
    }
    Ok(rows)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.into(), source }
}

/// Writes `train.tsv`, `validation.tsv`, `test.tsv` and `labels.txt` into `dir`.
pub fn save_tsv(splits: &DatasetSplits, dir: &Path) -> Result<(), DatasetError> {
    let files = [
        (TRAIN_FILE, &splits.train),
        (VALIDATION_FILE, &splits.validation),
        (TEST_FILE, &splits.test),
    ];
    for (name, rows) in files {
        let path = dir.join(name);
        write_atomic(&path, to_tsv(&splits.labels, rows).as_bytes()).map_err(io_err(&path))?;
    }
    let path = dir.join(LABELS_FILE);
    write_atomic(&path, splits.labels.to_text().as_bytes()).map_err(io_err(&path))
}

pub fn load_tsv(dir: &Path) -> Result<DatasetSplits, DatasetError> {
    let labels = LabelIndex::load(&dir.join(LABELS_FILE))?;
    let read = |name: &str| {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        parse_tsv(&path, &text, &labels)
    };
    Ok(DatasetSplits {
        train: read(TRAIN_FILE)?,
        validation: read(VALIDATION_FILE)?,
        test: read(TEST_FILE)?,
        labels,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::ontology::OntologyClass;

    fn id(s: &str) -> ClassId {
        ClassId::new(s).unwrap()
    }

    fn leaf(name: &str, smiles: &str, parents: &[&str]) -> OntologyClass {
        OntologyClass::new(id(name), name).with_smiles(smiles).with_parents(parents.iter().map(|p| id(p)))
    }

    /// root <- cover <- {left, right}; left and right each have 3 structured leaves.
    fn two_subtrees() -> OntologyGraph {
        let mut classes = vec![
            OntologyClass::new(id("root"), "root"),
            OntologyClass::new(id("cover"), "cover").with_parents([id("root")]),
            OntologyClass::new(id("left"), "left").with_parents([id("cover")]),
            OntologyClass::new(id("right"), "right").with_parents([id("cover")]),
        ];
        for i in 0..3 {
            classes.push(leaf(&format!("l{i}"), &format!("C{}", "C".repeat(i)), &["left"]));
            classes.push(leaf(&format!("r{i}"), &format!("O{}", "O".repeat(i)), &["right"]));
        }
        OntologyGraph::from_classes(classes).unwrap()
    }

    #[test]
    fn exactly_k_candidates_are_all_selected() {
        let g = two_subtrees();
        // min_members 6: only root and cover qualify
        for seed in 0..5 {
            let idx = select_label_classes(&g, 2, 6, seed).unwrap();
            assert_eq!(idx.classes(), &[id("cover"), id("root")]);
        }
    }

    #[test]
    fn disjoint_subtrees_beat_the_cover() {
        let g = two_subtrees();
        // oracle: exhaustive search over all 2-subsets of {cover, left, right, root}
        let leaves: Vec<ClassId> = g.structured_leaves().into_iter().collect();
        let members = leaf_descendants(&g, &leaves).unwrap();
        let names: Vec<&ClassId> = members.keys().collect();
        let mut best = (u64::MAX, BTreeSet::new());
        for a in 0..names.len() {
            for b in a + 1..names.len() {
                let sa: BTreeSet<_> = members[names[a]].iter().collect();
                let sb: BTreeSet<_> = members[names[b]].iter().collect();
                let o = sa.intersection(&sb).count() as u64;
                if o < best.0 {
                    best = (o, [names[a].clone(), names[b].clone()].into_iter().collect());
                }
            }
        }
        assert_eq!(best.0, 0);
        for seed in 0..10 {
            let idx = select_label_classes(&g, 2, 3, seed).unwrap();
            let got: BTreeSet<ClassId> = idx.classes().iter().cloned().collect();
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn not_enough_candidates() {
        let g = two_subtrees();
        assert!(matches!(
            select_label_classes(&g, 5, 3, 0),
            Err(DatasetError::NotEnoughCandidates { needed: 5, found: 4, .. })
        ));
        assert!(matches!(select_label_classes(&g, 0, 3, 0), Err(DatasetError::ZeroLabels)));
    }

    #[test]
    fn single_label_leaf_gets_one_hot_row() {
        let g = two_subtrees();
        let labels = LabelIndex::new(vec![id("left"), id("right")]).unwrap();
        let (data, stats) = build_dataset(&g, &labels).unwrap();
        assert_eq!(data.len(), 6);
        for m in &data {
            assert_eq!(m.label_count(), 1);
        }
        assert_eq!(stats.labels_per_molecule, [(1, 6)].into_iter().collect());
        assert_eq!(stats.class_counts, vec![(id("left"), 3), (id("right"), 3)]);
    }

    #[test]
    fn label_rows_match_recomputed_ancestry() {
        let mut classes = vec![
            OntologyClass::new(id("R"), "r"),
            OntologyClass::new(id("A"), "a").with_parents([id("R")]),
            OntologyClass::new(id("B"), "b").with_parents([id("R")]),
            OntologyClass::new(id("C"), "c").with_parents([id("A"), id("B")]),
            OntologyClass::new(id("D"), "d").with_parents([id("B")]),
        ];
        let parents = [["A"].as_slice(), &["B"], &["C"], &["D"], &["C", "D"], &["A", "D"], &["R"], &["C"], &["B"], &["A"]];
        for (i, p) in parents.iter().enumerate() {
            classes.push(leaf(&format!("L{i}"), &"C".repeat(i + 1), p));
        }
        let g = OntologyGraph::from_classes(classes).unwrap();
        let labels = LabelIndex::new(vec![id("A"), id("B"), id("C"), id("D")]).unwrap();
        let (data, _) = build_dataset(&g, &labels).unwrap();
        // L6 sits directly under R, which is not a label
        assert_eq!(data.len(), 9);
        for m in &data {
            let leaf_id = g.classes().find(|c| c.smiles.as_deref() == Some(&m.smiles)).unwrap().id.clone();
            let anc = g.ancestors(&leaf_id).unwrap();
            let expected: Vec<bool> = labels.classes().iter().map(|c| anc.contains(c)).collect();
            assert_eq!(m.labels, expected, "{leaf_id}");
        }
    }

    #[test]
    fn empty_and_unknown_label_errors() {
        let g = two_subtrees();
        let none = LabelIndex::new(vec![id("l0")]).unwrap();
        assert!(matches!(build_dataset(&g, &none), Err(DatasetError::Empty)));
        let unknown = LabelIndex::new(vec![id("zzz")]).unwrap();
        assert!(matches!(build_dataset(&g, &unknown), Err(DatasetError::UnknownLabel(_))));
    }

    #[test]
    fn largest_remainder_sizes() {
        assert_eq!(split_sizes(10, [0.7, 0.09, 0.21]).unwrap(), [7, 1, 2]);
        let n = 31_280.0;
        let ratios = [21_896.0 / n, 2_815.0 / n, 6_569.0 / n];
        assert_eq!(split_sizes(31_280, ratios).unwrap(), [21_896, 2_815, 6_569]);
        assert!(split_sizes(10, [0.5, 0.5, 0.0]).is_err());
        assert!(split_sizes(10, [0.5, 0.4, 0.2]).is_err());
    }

    fn toy_rows(n: usize) -> Vec<LabeledMolecule> {
        (0..n).map(|i| LabeledMolecule { smiles: format!("C{i}"), labels: vec![i % 2 == 0, true] }).collect()
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let labels = LabelIndex::new(vec![id("A"), id("B")]).unwrap();
        let rows = toy_rows(50);
        let a = split_dataset(&labels, &rows, [0.7, 0.1, 0.2], 7).unwrap();
        let b = split_dataset(&labels, &rows, [0.7, 0.1, 0.2], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (35, 5, 10));
        let all: BTreeSet<&str> = a.all().map(|m| m.smiles.as_str()).collect();
        assert_eq!(all.len(), 50);
        let c = split_dataset(&labels, &rows, [0.7, 0.1, 0.2], 8).unwrap();
        assert_ne!(a.train, c.train);
        assert!(matches!(split_dataset(&labels, &rows[..2], [0.7, 0.1, 0.2], 7), Err(DatasetError::TooSmall(2))));
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelIndex::new(vec![id("CHEBI:1"), id("CHEBI:2")]).unwrap();
        let splits = split_dataset(&labels, &toy_rows(12), [0.5, 0.25, 0.25], 3).unwrap();
        save_tsv(&splits, dir.path()).unwrap();
        let loaded = load_tsv(dir.path()).unwrap();
        assert_eq!(loaded.labels, splits.labels);
        assert_eq!((loaded.train, loaded.validation, loaded.test), (splits.train, splits.validation, splits.test));

        let p = Path::new("x.tsv");
        let err = parse_tsv(p, "smiles\tCHEBI:1\tCHEBI:2\nCC\t1\t0\nCCO\t1\n", &labels).unwrap_err();
        assert!(matches!(err, DatasetError::Malformed { line: 3, .. }), "{err}");
        let err = parse_tsv(p, "smiles\tCHEBI:1\nCC\t1\n", &labels).unwrap_err();
        assert!(matches!(err, DatasetError::LabelCountMismatch { expected: 2, found: 1, .. }));
        let err = parse_tsv(p, "smiles\tCHEBI:1\tCHEBI:2\nCC\t1\t2\n", &labels).unwrap_err();
        assert!(matches!(err, DatasetError::Malformed { line: 2, .. }));
    }

    #[test]
    fn five_hundred_label_header() {
        let ids: Vec<ClassId> = (0..500).map(|i| id(&format!("CHEBI:{i}"))).collect();
        let labels = LabelIndex::new(ids).unwrap();
        let mut row = vec![false; 500];
        row[17] = true;
        let text = to_tsv(&labels, &[LabeledMolecule { smiles: "CC".into(), labels: row }]);
        let reread = LabelIndex::from_text(&labels.to_text()).unwrap();
        assert_eq!(reread.len(), 500);
        assert_eq!(parse_tsv(Path::new("t"), &text, &reread).unwrap().len(), 1);
    }
}
