#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;

use gram::ehr::{PatientRecord, Visit};
use gram::ontology::{parse_ontology_str, ConceptId, OntologyDag};
use rand::Rng;

/// Random DAG with `nodes` nodes: node `i` gets 1..=3 parents among the
/// higher-numbered nodes, and the last node is the root.
pub fn random_dag(rng: &mut impl Rng, nodes: usize) -> OntologyDag {
    assert!(nodes >= 2);
    let mut text = String::new();
    for i in 0..nodes - 1 {
        let count = rng.gen_range(1..=3usize);
        let parents: BTreeSet<usize> = (0..count).map(|_| rng.gen_range(i + 1..nodes)).collect();
        for p in parents {
            let _ = writeln!(text, "n{i}\tn{p}");
        }
    }
    parse_ontology_str(&text).expect("generated DAG is valid")
}

/// Ancestors by exhaustive depth-first search, without the node itself.
pub fn dfs_ancestors(dag: &OntologyDag, node: ConceptId) -> BTreeSet<ConceptId> {
    let mut seen = BTreeSet::new();
    let mut stack = dag.parents(node).to_vec();
    while let Some(c) = stack.pop() {
        if seen.insert(c) {
            stack.extend_from_slice(dag.parents(c));
        }
    }
    seen
}

pub fn random_records(rng: &mut impl Rng, dag: &OntologyDag, patients: usize, max_visits: usize) -> Vec<PatientRecord> {
    (0..patients)
        .map(|p| PatientRecord {
            patient_id: format!("p{p}"),
            visits: (0..rng.gen_range(2..=max_visits))
                .map(|_| {
                    let k = rng.gen_range(1..=dag.num_leaves().min(4));
                    Visit::new((0..k).map(|_| ConceptId::from_index(rng.gen_range(0..dag.num_leaves()))).collect())
                        .unwrap()
                })
                .collect(),
        })
        .collect()
}
