//! Ancestor-augmented co-occurrence counting.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::ehr::{PatientRecord, Visit};
use crate::error::{Error, Result};
use crate::ontology::{AncestorMap, ConceptId};

/// Expands a visit with every code's ancestors. Each code contributes itself
/// followed by its distinct ancestors, so a node shared by `k` codes appears
/// `k` times.
pub fn augment_visit(visit: &Visit, amap: &AncestorMap) -> Vec<ConceptId> {
    visit
        .codes()
        .iter()
        .flat_map(|c| amap.get(c.index()).iter().copied())
        .collect()
}

/// `count(c, V')` for every node present in the augmented visit.
pub fn augmented_counts(visit: &Visit, amap: &AncestorMap) -> BTreeMap<ConceptId, u64> {
    let mut counts = BTreeMap::new();
    for c in augment_visit(visit, amap) {
        *counts.entry(c).or_insert(0) += 1;
    }
    counts
}

/// Symmetric co-occurrence matrix with the diagonal left out. Only the upper
/// triangle is stored, so mirrored lookups are bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCooccurrence {
    dim: usize,
    upper: BTreeMap<(u32, u32), f64>,
}

impl SparseCooccurrence {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let key = if i < j { (i as u32, j as u32) } else { (j as u32, i as u32) };
        self.upper.get(&key).copied().unwrap_or(0.0)
    }

    /// Stored entries `(i, j, value)` with `i < j`, sorted.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.upper
            .iter()
            .map(|(&(i, j), &v)| (i as usize, j as usize, v))
    }

    pub fn from_upper(dim: usize, entries: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut upper = BTreeMap::new();
        for (i, j, v) in entries {
            if i >= j || j >= dim {
                return Err(Error::invalid(format!("entry ({i}, {j}) is not strictly upper-triangular within {dim}")));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("entry ({i}, {j}) must be positive, got {v}")));
            }
            upper.insert((i as u32, j as u32), v);
        }
        Ok(SparseCooccurrence { dim, upper })
    }

    /// `i<TAB>j<TAB>value` lines with `i < j`, sorted.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::new();
        for (i, j, v) in self.iter_upper() {
            let _ = writeln!(out, "{i}\t{j}\t{v}");
        }
        out
    }

    pub fn from_snapshot(dim: usize, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = || Error::Parse {
                line: n + 1,
                message: "expected `i<TAB>j<TAB>value`".into(),
            };
            let mut fields = line.split('\t');
            let i = fields.next().and_then(|f| f.parse().ok()).ok_or_else(parse_err)?;
            let j = fields.next().and_then(|f| f.parse().ok()).ok_or_else(parse_err)?;
            let v = fields.next().and_then(|f| f.parse().ok()).ok_or_else(parse_err)?;
            entries.push((i, j, v));
        }
        Self::from_upper(dim, entries)
    }
}

type Counts = HashMap<(u32, u32), u64>;

fn accumulate(records: &[PatientRecord], amap: &AncestorMap, counts: &mut Counts) {
    for r in records {
        for v in &r.visits {
            let per_node: Vec<(ConceptId, u64)> = augmented_counts(v, amap).into_iter().collect();
            for (a, &(ci, ni)) in per_node.iter().enumerate() {
                for &(cj, nj) in &per_node[a + 1..] {
                    *counts.entry((ci.0, cj.0)).or_insert(0) += ni * nj;
                }
            }
        }
    }
}

fn finish(dim: usize, counts: Counts) -> SparseCooccurrence {
    SparseCooccurrence {
        dim,
        upper: counts.into_iter().map(|(k, v)| (k, v as f64)).collect(),
    }
}

/// `M_ij = Σ_visits count(i, V') · count(j, V')` over the augmented visits.
///
/// Counting is done in integers, so the result does not depend on patient
/// order.
pub fn build_cooccurrence(records: &[PatientRecord], amap: &AncestorMap) -> SparseCooccurrence {
    let mut counts = Counts::new();
    accumulate(records, amap, &mut counts);
    finish(amap.num_nodes(), counts)
}

/// Same result as [`build_cooccurrence`], counted on `shards` threads with
/// private accumulators merged at the end.
pub fn build_cooccurrence_sharded(
    records: &[PatientRecord],
    amap: &AncestorMap,
    shards: usize,
) -> SparseCooccurrence {
    let shards = shards.max(1);
    let chunk = records.len().div_ceil(shards).max(1);
    let partials: Vec<Counts> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut counts = Counts::new();
                    accumulate(part, amap, &mut counts);
                    counts
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("counting thread panicked")).collect()
    });
    let mut merged = Counts::new();
    for part in partials {
        for (k, v) in part {
            *merged.entry(k).or_insert(0) += v;
        }
    }
    finish(amap.num_nodes(), merged)
}

/// Co-occurrence of raw codes within visits, without ancestors.
pub fn build_leaf_cooccurrence(records: &[PatientRecord], num_leaves: usize) -> SparseCooccurrence {
    build_cooccurrence(records, &AncestorMap::identity(num_leaves))
}
