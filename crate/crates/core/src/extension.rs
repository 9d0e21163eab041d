//! Classifying new structures and inserting them into the ontology.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::LabelIndex;
use crate::model::{EncoderModel, ModelError, Mode};
use crate::ontology::{ClassId, OntologyClass, OntologyError, OntologyGraph};
use crate::tokenizer::{Tokenizer, TokenizerError};

pub const DEFAULT_TOP_K: usize = 3;
pub const CURATOR_COMMENT: &str = "comment: proposed automatically; name is the SMILES string and awaits curator review";

#[derive(Debug, Error)]
pub enum ExtensionError {
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("label class {0} is not in the ontology")]
    LabelNotInGraph(ClassId),
    #[error("model predicts {model} labels but the label index has {labels}")]
    LabelCount { model: usize, labels: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredClass {
    pub class: ClassId,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub smiles: String,
    /// Per label column, in label-index order.
    pub probabilities: Vec<f64>,
    /// Labels with probability `>= threshold`, in label-index order.
    pub accepted: Vec<ScoredClass>,
    pub below_threshold: bool,
    /// Highest-probability labels, offered as suggestions when nothing is accepted.
    pub top_k: Vec<ScoredClass>,
    pub truncated: bool,
}

fn check_threshold(threshold: f64) -> Result<(), ExtensionError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(ExtensionError::InvalidThreshold(threshold))
    }
}

/// Encodes, runs the model, and thresholds each input. Over-long inputs are truncated with a warning.
pub fn classify_all(
    model: &EncoderModel,
    tokenizer: &Tokenizer,
    labels: &LabelIndex,
    smiles: &[String],
    threshold: f64,
    top_k: usize,
) -> Result<Vec<ClassificationResult>, ExtensionError> {
    check_threshold(threshold)?;
    if model.config().n_labels != labels.len() {
        return Err(ExtensionError::LabelCount { model: model.config().n_labels, labels: labels.len() });
    }
    let mut encoded = Vec::with_capacity(smiles.len());
    let mut truncated = Vec::with_capacity(smiles.len());
    for s in smiles {
        let (seq, cut) = tokenizer.encode_truncated(s, model.config().max_len)?;
        if cut {
            log::warn!("input {s:?} truncated to {} tokens", model.config().max_len);
        }
        encoded.push(seq);
        truncated.push(cut);
    }
    let mut out = Vec::with_capacity(smiles.len());
    for (chunk_start, chunk) in (0..encoded.len()).step_by(64).zip(encoded.chunks(64)) {
        for (i, fwd) in model.forward(chunk, false, Mode::Inference)?.into_iter().enumerate() {
            let idx = chunk_start + i;
            let p = fwd.probabilities;
            let scored = |j: usize| ScoredClass { class: labels.class(j).clone(), probability: p[j] };
            let accepted: Vec<ScoredClass> = (0..p.len()).filter(|&j| p[j] >= threshold).map(scored).collect();
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let top = order.into_iter().take(top_k).map(scored).collect();
            out.push(ClassificationResult {
                smiles: smiles[idx].clone(),
                below_threshold: accepted.is_empty(),
                accepted,
                top_k: top,
                probabilities: p,
                truncated: truncated[idx],
            });
        }
    }
    Ok(out)
}

pub fn classify(
    model: &EncoderModel,
    tokenizer: &Tokenizer,
    labels: &LabelIndex,
    smiles: &str,
    threshold: f64,
) -> Result<ClassificationResult, ExtensionError> {
    let mut all = classify_all(model, tokenizer, labels, &[smiles.to_string()], threshold, DEFAULT_TOP_K)?;
    Ok(all.remove(0))
}

/// Prefix and zero-padding width for new class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdNamespace {
    pub prefix: String,
    pub width: usize,
}

impl Default for IdNamespace {
    fn default() -> Self {
        IdNamespace { prefix: "ONTOEXT:".to_string(), width: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub superclass: ClassId,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtensionProposal {
    pub new_id: ClassId,
    pub name: String,
    pub smiles: String,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BelowThreshold {
    pub smiles: String,
    pub suggestions: Vec<ScoredClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ProposalSet {
    pub proposals: Vec<ExtensionProposal>,
    pub below_threshold: Vec<BelowThreshold>,
}

/// Drops every accepted class that is an ancestor of another accepted class.
pub fn most_specific(graph: &OntologyGraph, accepted: &[ScoredClass]) -> Result<Vec<ScoredClass>, ExtensionError> {
    let mut implied: BTreeSet<ClassId> = BTreeSet::new();
    for a in accepted {
        if !graph.contains(&a.class) {
            return Err(ExtensionError::LabelNotInGraph(a.class.clone()));
        }
        implied.extend(graph.ancestors(&a.class)?);
    }
    Ok(accepted.iter().filter(|a| !implied.contains(&a.class)).cloned().collect())
}

/// One proposal per result with an accepted label; ids continue past the
/// largest numeric suffix present in the graph.
pub fn propose_extension(
    graph: &OntologyGraph,
    results: &[ClassificationResult],
    namespace: &IdNamespace,
) -> Result<ProposalSet, ExtensionError> {
    let mut next = graph.classes().filter_map(|c| c.id.numeric_suffix()).max().map_or(1, |m| m + 1);
    let mut set = ProposalSet::default();
    for r in results {
        if r.below_threshold {
            set.below_threshold.push(BelowThreshold { smiles: r.smiles.clone(), suggestions: r.top_k.clone() });
            continue;
        }
        let kept = most_specific(graph, &r.accepted)?;
        let new_id = ClassId::new(format!("{}{:0width$}", namespace.prefix, next, width = namespace.width))?;
        next += 1;
        set.proposals.push(ExtensionProposal {
            new_id,
            name: r.smiles.clone(),
            smiles: r.smiles.clone(),
            edges: kept.into_iter().map(|s| Edge { superclass: s.class, confidence: s.probability }).collect(),
        });
    }
    if !set.below_threshold.is_empty() {
        log::info!("{} inputs had no class above threshold; reported as suggestions only", set.below_threshold.len());
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChangeReport {
    pub added: Vec<ExtensionProposal>,
    pub below_threshold: Vec<BelowThreshold>,
}

impl ChangeReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    fn confidence(&self, child: &ClassId, parent: &ClassId) -> Option<f64> {
        self.added
            .iter()
            .find(|p| &p.new_id == child)
            .and_then(|p| p.edges.iter().find(|e| &e.superclass == parent))
            .map(|e| e.confidence)
    }
}

/// Inserts every proposal as a new leaf. Existing classes and edges are untouched.
pub fn extend(graph: &OntologyGraph, set: &ProposalSet) -> Result<(OntologyGraph, ChangeReport), ExtensionError> {
    let additions = set
        .proposals
        .iter()
        .map(|p| {
            let mut class = OntologyClass::new(p.new_id.clone(), p.name.clone()).with_smiles(p.smiles.clone());
            class.extra_lines.push(CURATOR_COMMENT.to_string());
            (class, p.edges.iter().map(|e| e.superclass.clone()).collect())
        })
        .collect();
    let extended = graph.insert_subsumptions(additions)?;
    Ok((extended, ChangeReport { added: set.proposals.clone(), below_threshold: set.below_threshold.clone() }))
}

/// OBO text of an extended graph; new edges carry their confidence in the `is_a` comment.
pub fn extended_obo(graph: &OntologyGraph, report: &ChangeReport) -> String {
    graph.to_obo_with(|child, parent| {
        let name = graph.get(parent).map(|p| p.name.clone()).filter(|n| !n.is_empty());
        match (report.confidence(child, parent), name) {
            (Some(c), Some(n)) => Some(format!("{n} (confidence {c:.4})")),
            (Some(c), None) => Some(format!("confidence {c:.4}")),
            (None, n) => n,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> ClassId {
        s.parse().unwrap()
    }

    fn graph() -> OntologyGraph {
        OntologyGraph::from_classes([
            OntologyClass::new(id("X:1"), "root"),
            OntologyClass::new(id("X:2"), "a").with_parents([id("X:1")]),
            OntologyClass::new(id("X:3"), "b").with_parents([id("X:1")]),
            OntologyClass::new(id("X:40"), "leaf").with_smiles("CC").with_parents([id("X:2")]),
        ])
        .unwrap()
    }

    fn result(smiles: &str, accepted: &[(&str, f64)]) -> ClassificationResult {
        let accepted: Vec<ScoredClass> =
            accepted.iter().map(|(c, p)| ScoredClass { class: id(c), probability: *p }).collect();
        ClassificationResult {
            smiles: smiles.into(),
            probabilities: vec![],
            below_threshold: accepted.is_empty(),
            top_k: accepted.clone(),
            accepted,
            truncated: false,
        }
    }

    #[test]
    fn parent_is_pruned() {
        let g = graph();
        let set = propose_extension(&g, &[result("CO", &[("X:1", 0.9), ("X:2", 0.8)])], &IdNamespace::default()).unwrap();
        assert_eq!(set.proposals.len(), 1);
        let p = &set.proposals[0];
        assert_eq!(p.edges, vec![Edge { superclass: id("X:2"), confidence: 0.8 }]);
        assert_eq!(p.new_id.as_str(), "ONTOEXT:0000041");
        assert_eq!(p.name, "CO");
    }

    #[test]
    fn below_threshold_results_become_suggestions() {
        let g = graph();
        let set = propose_extension(&g, &[result("CO", &[]), result("CN", &[])], &IdNamespace::default()).unwrap();
        assert!(set.proposals.is_empty());
        assert_eq!(set.below_threshold.len(), 2);
        let (g2, report) = extend(&g, &set).unwrap();
        assert_eq!(g2, g);
        assert!(report.added.is_empty());
    }

    #[test]
    fn extension_adds_leaves_and_rejects_reruns() {
        let g = graph();
        let results = [result("CO", &[("X:2", 0.7)]), result("CN", &[("X:3", 0.6)])];
        let set = propose_extension(&g, &results, &IdNamespace { prefix: "N:".into(), width: 3 }).unwrap();
        let (g2, report) = extend(&g, &set).unwrap();
        assert_eq!(g2.len(), g.len() + 2);
        assert!(g2.topological_order().is_some());
        for p in &report.added {
            assert!(g2.is_leaf(&p.new_id));
        }
        let obo = extended_obo(&g2, &report);
        assert!(obo.contains("id: N:041\nname: CO\nis_a: X:2 ! a (confidence 0.7000)\n"), "{obo}");
        assert!(obo.contains(CURATOR_COMMENT));
        assert!(matches!(extend(&g2, &set), Err(ExtensionError::Ontology(OntologyError::DuplicateId { .. }))));
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["added"][1]["edges"][0]["superclass"], "X:3");
    }

    #[test]
    fn unknown_labels_are_rejected() {
        let g = graph();
        let err = propose_extension(&g, &[result("CO", &[("Y:9", 0.9)])], &IdNamespace::default()).unwrap_err();
        assert!(matches!(err, ExtensionError::LabelNotInGraph(_)));
        let set = ProposalSet {
            proposals: vec![ExtensionProposal {
                new_id: id("N:1"),
                name: "CO".into(),
                smiles: "CO".into(),
                edges: vec![Edge { superclass: id("X:99"), confidence: 0.9 }],
            }],
            below_threshold: vec![],
        };
        assert!(matches!(extend(&g, &set), Err(ExtensionError::Ontology(OntologyError::UnknownSuperclass { .. }))));
    }

    #[test]
    fn invalid_threshold() {
        assert!(check_threshold(1.0).is_err());
        assert!(check_threshold(0.0).is_err());
        assert!(check_threshold(0.5).is_ok());
    }
}
