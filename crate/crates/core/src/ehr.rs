//! Patient visit sequences, label construction and dataset splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ConceptId, OntologyDag};

/// A nonempty set of codes recorded at one encounter, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visit {
    codes: Vec<ConceptId>,
}

impl Visit {
    /// Deduplicates `codes`; fails when nothing remains.
    pub fn new(mut codes: Vec<ConceptId>) -> Result<Self> {
        codes.sort_unstable();
        codes.dedup();
        if codes.is_empty() {
            return Err(Error::invalid("a visit needs at least one code"));
        }
        Ok(Visit { codes })
    }

    pub fn codes(&self) -> &[ConceptId] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn contains(&self, code: ConceptId) -> bool {
        self.codes.binary_search(&code).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn num_visits(&self) -> usize {
        self.visits.len()
    }
}

/// `x_t`: position `i` is 1 iff code `i` is in the visit.
pub fn multi_hot(visit: &Visit, dim: usize) -> Vec<u8> {
    let mut out = vec![0u8; dim];
    for c in visit.codes() {
        out[c.index()] = 1;
    }
    out
}

/// Inverse of [`multi_hot`]; `None` for the all-zero vector.
pub fn visit_from_multi_hot(bits: &[u8]) -> Option<Visit> {
    let codes = bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .map(|(i, _)| ConceptId::from_index(i))
        .collect();
    Visit::new(codes).ok()
}

#[derive(Debug)]
pub struct LoadedRecords {
    pub records: Vec<PatientRecord>,
    /// Patients removed for having fewer than two visits.
    pub dropped: usize,
}

pub fn load_records(path: impl AsRef<Path>, dag: &OntologyDag) -> Result<LoadedRecords> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, dag)
}

#[derive(Deserialize)]
struct RecordRow {
    patient_id: String,
    visit_index: i64,
    code: String,
}

/// Reads `patient_id,visit_index,code` rows. Patients keep their order of
/// first appearance; rows for one patient must have non-decreasing visit
/// indices.
pub fn read_records(reader: impl std::io::Read, dag: &OntologyDag) -> Result<LoadedRecords> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, ConceptId)>> = HashMap::new();
    for (n, row) in rdr.deserialize::<RecordRow>().enumerate() {
        let line = n + 2;
        let row = row?;
        let code = dag
            .id(&row.code)
            .filter(|&c| dag.is_leaf(c))
            .ok_or_else(|| Error::UnknownCode(row.code.clone()))?;
        let entry = rows.entry(row.patient_id.clone()).or_insert_with(|| {
            order.push(row.patient_id.clone());
            Vec::new()
        });
        if let Some(&(last, _)) = entry.last() {
            if row.visit_index < last {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "visit index {} after {} for patient `{}`",
                        row.visit_index, last, row.patient_id
                    ),
                });
            }
        }
        entry.push((row.visit_index, code));
    }

    let mut records = Vec::with_capacity(order.len());
    let mut dropped = 0;
    for pid in order {
        let patient_rows = rows.remove(&pid).expect("patient present");
        let mut visits = Vec::new();
        let mut current: Option<(i64, Vec<ConceptId>)> = None;
        for (idx, code) in patient_rows {
            match &mut current {
                Some((cur, codes)) if *cur == idx => codes.push(code),
                _ => {
                    if let Some((_, codes)) = current.take() {
                        visits.push(Visit::new(codes)?);
                    }
                    current = Some((idx, vec![code]));
                }
            }
        }
        if let Some((_, codes)) = current {
            visits.push(Visit::new(codes)?);
        }
        if visits.len() < 2 {
            dropped += 1;
            continue;
        }
        records.push(PatientRecord {
            patient_id: pid,
            visits,
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} patient(s) with fewer than two visits");
    }
    Ok(LoadedRecords { records, dropped })
}

/// Writes records in the `patient_id,visit_index,code` format.
pub fn write_records(
    writer: impl std::io::Write,
    records: &[PatientRecord],
    dag: &OntologyDag,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "visit_index", "code"])?;
    for r in records {
        for (t, v) in r.visits.iter().enumerate() {
            for &c in v.codes() {
                w.write_record([r.patient_id.as_str(), &t.to_string(), dag.name(c)])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<records>", e))?;
    Ok(())
}

/// Many-to-one map from leaf codes to label groups `[0, L)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    group_of: Vec<usize>,
    group_names: Vec<String>,
}

impl GroupMap {
    pub fn new(group_of: Vec<usize>, group_names: Vec<String>) -> Result<Self> {
        if let Some(&bad) = group_of.iter().find(|&&g| g >= group_names.len()) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: group_names.len(),
            });
        }
        if group_names.len() > group_of.len() {
            return Err(Error::invalid("more label groups than leaf codes"));
        }
        Ok(GroupMap {
            group_of,
            group_names,
        })
    }

    /// One group per leaf.
    pub fn identity(dag: &OntologyDag) -> Self {
        GroupMap {
            group_of: (0..dag.num_leaves()).collect(),
            group_names: dag.names()[..dag.num_leaves()].to_vec(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group(&self, code: ConceptId) -> usize {
        self.group_of[code.index()]
    }

    pub fn group_name(&self, g: usize) -> &str {
        &self.group_names[g]
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }
}

pub fn load_group_map(path: impl AsRef<Path>, dag: &OntologyDag) -> Result<GroupMap> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_group_map(file, dag)
}

/// Reads `code,group_name` rows. Group ids follow sorted group names.
pub fn read_group_map(reader: impl std::io::Read, dag: &OntologyDag) -> Result<GroupMap> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut assignment: Vec<Option<String>> = vec![None; dag.num_leaves()];
    for row in rdr.deserialize::<(String, String)>() {
        let (code, group) = row?;
        let id = dag
            .id(&code)
            .filter(|&c| dag.is_leaf(c))
            .ok_or_else(|| Error::UnknownCode(code.clone()))?;
        assignment[id.index()] = Some(group);
    }
    let names: BTreeSet<&String> = assignment.iter().flatten().collect();
    let group_names: Vec<String> = names.into_iter().cloned().collect();
    let mut group_of = Vec::with_capacity(assignment.len());
    for (i, g) in assignment.iter().enumerate() {
        let g = g.as_ref().ok_or_else(|| {
            Error::invalid(format!("code `{}` has no label group", dag.names()[i]))
        })?;
        group_of.push(group_names.binary_search(g).expect("name collected"));
    }
    GroupMap::new(group_of, group_names)
}

pub fn write_group_map(
    writer: impl std::io::Write,
    groups: &GroupMap,
    dag: &OntologyDag,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["code", "group_name"])?;
    for leaf in dag.leaves() {
        w.write_record([dag.name(leaf), groups.group_name(groups.group(leaf))])?;
    }
    w.flush().map_err(|e| Error::io("<groups>", e))?;
    Ok(())
}

pub fn load_flags(path: impl AsRef<Path>) -> Result<BTreeMap<String, bool>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flags(file)
}

/// Reads `patient_id,label` rows where label is 0/1 (or true/false).
pub fn read_flags(reader: impl std::io::Read) -> Result<BTreeMap<String, bool>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = BTreeMap::new();
    for (n, row) in rdr.deserialize::<(String, String)>().enumerate() {
        let (pid, label) = row?;
        let flag = match label.as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(Error::Parse {
                    line: n + 2,
                    message: format!("label must be 0 or 1, found `{other}`"),
                })
            }
        };
        out.insert(pid, flag);
    }
    Ok(out)
}

pub fn write_flags(writer: impl std::io::Write, flags: &BTreeMap<String, bool>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "label"])?;
    for (pid, &flag) in flags {
        w.write_record([pid.as_str(), if flag { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| Error::io("<flags>", e))?;
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sequential,
    Binary,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Task::Sequential),
            "binary" => Ok(Task::Binary),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Labels {
    /// `y_t` for `t = 1..T-1` as sorted label-group sets (sparse multi-hot).
    Sequential(Vec<Vec<usize>>),
    Binary(bool),
}

/// Sequential targets are the label groups of the next visit; the binary
/// target is the per-patient flag.
pub fn build_labels(record: &PatientRecord, groups: &GroupMap, task: Task, flag: bool) -> Labels {
    match task {
        Task::Sequential => Labels::Sequential(
            record.visits[1..]
                .iter()
                .map(|v| {
                    let set: BTreeSet<usize> = v.codes().iter().map(|&c| groups.group(c)).collect();
                    set.into_iter().collect()
                })
                .collect(),
        ),
        Task::Binary => Labels::Binary(flag),
    }
}

/// Dense multi-hot form of one sparse label set.
pub fn label_vector(labels: &[usize], num_groups: usize) -> Vec<u8> {
    let mut out = vec![0u8; num_groups];
    for &g in labels {
        out[g] = 1;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<PatientRecord>,
    pub validation: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.75, 0.10, 0.15];

/// Seeded shuffle, then contiguous train/validation/test slices sized by
/// rounding `n * ratio`. Each part keeps the input's relative order.
pub fn split_dataset(records: &[PatientRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::invalid("split ratios must be nonnegative"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split ratios must sum to 1"));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    Ok(DatasetSplit {
        train: take(&order[..n_train]),
        validation: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

/// Occurrences of each label group over all sequential targets of `train`.
pub fn label_frequencies(train: &[PatientRecord], groups: &GroupMap) -> Vec<u64> {
    let mut counts = vec![0u64; groups.num_groups()];
    for r in train {
        if let Labels::Sequential(steps) = build_labels(r, groups, Task::Sequential, false) {
            for step in steps {
                for g in step {
                    counts[g] += 1;
                }
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::parse_ontology_str;
    use proptest::prelude::*;

    fn toy_dag() -> OntologyDag {
        parse_ontology_str("a\tp\nb\tp\nc\tq\nd\tq\np\troot\nq\troot\n").unwrap()
    }

    fn rec(id: &str, visits: &[&[u32]]) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            visits: visits
                .iter()
                .map(|v| Visit::new(v.iter().map(|&c| ConceptId(c)).collect()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn load_two_visits() {
        let dag = toy_dag();
        let csv = "patient_id,visit_index,code\np1,0,a\np1,1,b\n";
        let loaded = read_records(csv.as_bytes(), &dag).unwrap();
        assert_eq!(loaded.dropped, 0);
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.records[0].num_visits(), 2);
    }

    #[test]
    fn single_visit_patient_is_dropped() {
        let dag = toy_dag();
        let csv = "patient_id,visit_index,code\np1,0,a\np1,0,b\n";
        let loaded = read_records(csv.as_bytes(), &dag).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.dropped, 1);
    }

    #[test]
    fn unknown_code_is_named() {
        let dag = toy_dag();
        let csv = "patient_id,visit_index,code\np1,0,a\np1,1,zzz\n";
        match read_records(csv.as_bytes(), &dag) {
            Err(Error::UnknownCode(c)) => assert_eq!(c, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
        // internal nodes are not valid record codes
        let csv = "patient_id,visit_index,code\np1,0,a\np1,1,p\n";
        assert!(matches!(read_records(csv.as_bytes(), &dag), Err(Error::UnknownCode(_))));
    }

    #[test]
    fn non_monotone_visit_index() {
        let dag = toy_dag();
        let csv = "patient_id,visit_index,code\np1,1,a\np1,0,b\n";
        assert!(matches!(
            read_records(csv.as_bytes(), &dag),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn duplicate_codes_merge_and_interleaving_is_fine() {
        let dag = toy_dag();
        let csv = "patient_id,visit_index,code\np1,0,a\np2,0,c\np1,0,a\np2,3,d\np1,2,b\n";
        let loaded = read_records(csv.as_bytes(), &dag).unwrap();
        assert_eq!(loaded.records[0], rec("p1", &[&[0], &[1]]));
        assert_eq!(loaded.records[1], rec("p2", &[&[2], &[3]]));
    }

    #[test]
    fn write_then_read() {
        let dag = toy_dag();
        let records = vec![rec("x", &[&[0, 1], &[3]]), rec("y", &[&[2], &[2], &[1]])];
        let mut buf = Vec::new();
        write_records(&mut buf, &records, &dag).unwrap();
        let loaded = read_records(buf.as_slice(), &dag).unwrap();
        assert_eq!(loaded.records, records);
    }

    #[test]
    fn multi_hot_examples() {
        let v = Visit::new(vec![ConceptId(0), ConceptId(2)]).unwrap();
        assert_eq!(multi_hot(&v, 4), vec![1, 0, 1, 0]);
        let v = Visit::new(vec![ConceptId(3)]).unwrap();
        assert_eq!(multi_hot(&v, 4), vec![0, 0, 0, 1]);
        assert!(Visit::new(vec![]).is_err());
        assert_eq!(visit_from_multi_hot(&[0, 0, 0]), None);
    }

    proptest! {
        #[test]
        fn multi_hot_round_trip(bits in proptest::collection::vec(0u8..2, 1..40)) {
            match visit_from_multi_hot(&bits) {
                Some(v) => prop_assert_eq!(multi_hot(&v, bits.len()), bits),
                None => prop_assert!(bits.iter().all(|&b| b == 0)),
            }
        }
    }

    #[test]
    fn sequential_labels_map_and_union() {
        // b and c both map to group 5
        let gm = GroupMap::new(vec![0, 5, 5, 1, 2, 3], (0..6).map(|g| format!("g{g}")).collect())
            .unwrap();
        let r = rec("p", &[&[0], &[1, 2]]);
        let labels = build_labels(&r, &gm, Task::Sequential, false);
        assert_eq!(labels, Labels::Sequential(vec![vec![5]]));
        assert_eq!(label_vector(&[5], 6), vec![0, 0, 0, 0, 0, 1]);
        assert_eq!(build_labels(&r, &gm, Task::Binary, true), Labels::Binary(true));
        // more groups than leaves is rejected
        assert!(GroupMap::new(vec![0, 1], (0..3).map(|g| g.to_string()).collect()).is_err());
    }

    #[test]
    fn label_count_is_visits_minus_one() {
        let dag = toy_dag();
        let gm = GroupMap::identity(&dag);
        for t in 2..7 {
            let visits: Vec<Vec<u32>> = (0..t).map(|i| vec![(i % 4) as u32]).collect();
            let refs: Vec<&[u32]> = visits.iter().map(Vec::as_slice).collect();
            let Labels::Sequential(steps) = build_labels(&rec("p", &refs), &gm, Task::Sequential, false)
            else {
                panic!()
            };
            assert_eq!(steps.len(), t - 1);
        }
    }

    #[test]
    fn group_map_file() {
        let dag = toy_dag();
        let text = "code,group_name\na,left\nb,left\nc,right\nd,right\n";
        let gm = read_group_map(text.as_bytes(), &dag).unwrap();
        assert_eq!(gm.num_groups(), 2);
        assert_eq!(gm.group(ConceptId(1)), 0);
        assert_eq!(gm.group(ConceptId(3)), 1);
        let mut buf = Vec::new();
        write_group_map(&mut buf, &gm, &dag).unwrap();
        assert_eq!(read_group_map(buf.as_slice(), &dag).unwrap(), gm);

        let partial = "code,group_name\na,left\n";
        assert!(read_group_map(partial.as_bytes(), &dag).is_err());
    }

    #[test]
    fn flags_file() {
        let flags = read_flags("patient_id,label\np1,1\np2,0\n".as_bytes()).unwrap();
        assert!(flags["p1"]);
        assert!(!flags["p2"]);
        assert!(read_flags("patient_id,label\np1,maybe\n".as_bytes()).is_err());
    }

    fn many(n: usize) -> Vec<PatientRecord> {
        (0..n).map(|i| rec(&format!("p{i}"), &[&[0], &[1]])).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(&many(100), DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (75, 10, 15));
        let s = split_dataset(&many(10), [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (10, 0, 0));
        assert!(split_dataset(&many(10), [0.5, 0.2, 0.2], 3).is_err());
        assert!(split_dataset(&many(10), [1.2, -0.2, 0.0], 3).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let records = many(57);
        let a = split_dataset(&records, DEFAULT_SPLIT, 11).unwrap();
        let b = split_dataset(&records, DEFAULT_SPLIT, 11).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<&str> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .map(|r| r.patient_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 57);
        for (part, ratio) in [(&a.train, 0.75), (&a.validation, 0.10), (&a.test, 0.15)] {
            assert!((part.len() as f64 - 57.0 * ratio).abs() <= 1.0);
        }
        let c = split_dataset(&records, DEFAULT_SPLIT, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frequencies() {
        let gm = GroupMap::new(vec![0, 1, 2, 3, 4, 5], (0..6).map(|g| g.to_string()).collect())
            .unwrap();
        let one = vec![rec("p", &[&[0], &[2, 5]])];
        assert_eq!(label_frequencies(&one, &gm), vec![0, 0, 1, 0, 0, 1]);
        assert_eq!(label_frequencies(&[], &gm), vec![0; 6]);
    }

    #[test]
    fn frequencies_match_recount() {
        // every target contains code 3 (group 3); brute-force recount of target steps
        let gm = GroupMap::new(vec![0, 1, 2, 3], (0..4).map(|g| g.to_string()).collect()).unwrap();
        let records = vec![
            rec("a", &[&[0], &[3], &[3, 1]]),
            rec("b", &[&[3], &[2, 3]]),
            rec("c", &[&[1], &[3], &[0, 3], &[3]]),
        ];
        let steps: u64 = records.iter().map(|r| r.visits.len() as u64 - 1).sum();
        assert_eq!(label_frequencies(&records, &gm)[3], steps);
    }
}
