use std::collections::{BTreeMap, BTreeSet, VecDeque};

use ontoext::dataset::LabelIndex;
use ontoext::extension::{extend, propose_extension, ClassificationResult, IdNamespace, ScoredClass};
use ontoext::ontology::{ClassId, OntologyClass, OntologyGraph};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cid(i: usize) -> ClassId {
    ClassId::new(format!("R:{i}")).unwrap()
}

/// Random DAG: node `i` may only point at nodes `< i`, so the result is acyclic by construction.
pub fn random_dag(rng: &mut ChaCha8Rng, max_nodes: usize) -> OntologyGraph {
    let n = rng.random_range(1..=max_nodes);
    let density = rng.random_range(0.05..0.5);
    let classes = (0..n).map(|i| {
        let parents: Vec<ClassId> = (0..i).filter(|_| rng.random_bool(density)).map(cid).collect();
        let mut c = OntologyClass::new(cid(i), format!("class {i}")).with_parents(parents);
        if rng.random_bool(0.6) {
            c = c.with_smiles(format!("C{}", "C".repeat(i % 5)));
        }
        c
    });
    OntologyGraph::from_classes(classes.collect::<Vec<_>>()).expect("acyclic by construction")
}

/// Breadth-first transitive closure over parent edges.
pub fn bfs_ancestors(graph: &OntologyGraph, id: &ClassId) -> BTreeSet<ClassId> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<ClassId> = graph.get(id).unwrap().parents.iter().cloned().collect();
    while let Some(c) = queue.pop_front() {
        if seen.insert(c.clone()) {
            queue.extend(graph.get(&c).unwrap().parents.iter().cloned());
        }
    }
    seen
}

/// Every class of `before` appears unchanged in `after`.
pub fn is_subgraph(before: &OntologyGraph, after: &OntologyGraph) -> bool {
    before.classes().all(|c| after.get(&c.id) == Some(c))
}

/// One randomized classify-propose-extend round with all safety checks.
pub fn extension_run(seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_dag(&mut rng, 25);
    let ids: Vec<ClassId> = graph.classes().map(|c| c.id.clone()).collect();
    let k = rng.random_range(1..=ids.len().min(8));
    let labels = LabelIndex::new(ids.choose_multiple(&mut rng, k).cloned().collect()).map_err(|e| e.to_string())?;
    let threshold = 0.5;
    let results: Vec<ClassificationResult> = (0..rng.random_range(0..6))
        .map(|m| {
            let probabilities: Vec<f64> = (0..labels.len()).map(|_| rng.random_range(0.001..0.999)).collect();
            let scored = |j: usize| ScoredClass { class: labels.class(j).clone(), probability: probabilities[j] };
            let accepted: Vec<ScoredClass> = (0..labels.len()).filter(|&j| probabilities[j] >= threshold).map(scored).collect();
            ClassificationResult {
                smiles: format!("N{m}C"),
                below_threshold: accepted.is_empty(),
                top_k: (0..labels.len().min(3)).map(scored).collect(),
                accepted,
                probabilities,
                truncated: false,
            }
        })
        .collect();
    let set = propose_extension(&graph, &results, &IdNamespace::default()).map_err(|e| e.to_string())?;
    let expected = results.iter().filter(|r| !r.below_threshold).count();
    if set.proposals.len() != expected || set.below_threshold.len() != results.len() - expected {
        return Err(format!("seed {seed}: wrong proposal count"));
    }
    let oracle: BTreeMap<ClassId, BTreeSet<ClassId>> = ids.iter().map(|i| (i.clone(), bfs_ancestors(&graph, i))).collect();
    for (p, r) in set.proposals.iter().zip(results.iter().filter(|r| !r.below_threshold)) {
        let kept: BTreeSet<&ClassId> = p.edges.iter().map(|e| &e.superclass).collect();
        if kept.is_empty() {
            return Err(format!("seed {seed}: proposal without edges"));
        }
        for a in &kept {
            for b in &kept {
                if oracle[*a].contains(*b) {
                    return Err(format!("seed {seed}: {b} is an ancestor of {a} but both kept"));
                }
            }
        }
        for acc in &r.accepted {
            // a dropped class must be implied by a more specific kept one
            if !kept.contains(&acc.class) && !kept.iter().any(|k| oracle[*k].contains(&acc.class)) {
                return Err(format!("seed {seed}: {} dropped without a more specific class", acc.class));
            }
        }
        if let Some(e) = p.edges.iter().find(|e| r.accepted.iter().all(|a| a.class != e.superclass)) {
            return Err(format!("seed {seed}: edge to {} was never accepted", e.superclass));
        }
    }
    let (after, report) = extend(&graph, &set).map_err(|e| e.to_string())?;
    if after.topological_order().is_none() {
        return Err(format!("seed {seed}: cycle after extension"));
    }
    if !is_subgraph(&graph, &after) {
        return Err(format!("seed {seed}: prior graph modified"));
    }
    if after.len() != graph.len() + set.proposals.len() {
        return Err(format!("seed {seed}: class count"));
    }
    for p in &report.added {
        if !after.is_leaf(&p.new_id) || graph.contains(&p.new_id) {
            return Err(format!("seed {seed}: {} is not a fresh leaf", p.new_id));
        }
    }
    if !set.proposals.is_empty() && extend(&after, &set).is_ok() {
        return Err(format!("seed {seed}: re-running extend should fail"));
    }
    Ok(set.proposals.len())
}
