//! Synthetic EHR data over a balanced code hierarchy.
//!
//! Each patient follows a latent level-1 subtree that persists between visits
//! with the coherence probability and otherwise jumps by subtree popularity.
//! Codes are drawn from the active subtree with Zipf-skewed leaf popularity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{write_flags, write_group_map, write_records, GroupMap, PatientRecord, Visit};
use crate::error::{Error, Result};
use crate::ontology::{ConceptId, OntologyDag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_leaves: usize,
    /// Children per node from the root downwards; leaves hang below the last
    /// level.
    pub branching: Vec<usize>,
    pub num_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub min_codes: usize,
    pub max_codes: usize,
    /// Leaf popularity is `rank^-zipf_exponent`.
    pub zipf_exponent: f64,
    /// Chance the next visit stays in the current level-1 subtree.
    pub coherence: f64,
    /// Chance a code is drawn from the global distribution instead.
    pub noise: f64,
    /// Level-1 subtree whose visit defines the binary outcome.
    pub case_group: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_leaves: 400,
            branching: vec![32, 3],
            num_patients: 2000,
            min_visits: 4,
            max_visits: 12,
            min_codes: 1,
            max_codes: 4,
            zipf_exponent: 1.2,
            coherence: 0.8,
            noise: 0.05,
            case_group: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching.len() < 2 || self.branching.contains(&0) {
            return Err(Error::invalid("need at least two hierarchy levels with nonzero branching"));
        }
        let last_level: usize = self.branching.iter().product();
        if self.num_leaves < last_level {
            return Err(Error::invalid(format!(
                "{} leaves cannot fill {last_level} lowest-level nodes",
                self.num_leaves
            )));
        }
        if self.num_patients == 0 {
            return Err(Error::invalid("need at least one patient"));
        }
        if self.min_visits < 2 || self.min_visits > self.max_visits {
            return Err(Error::invalid("visit range must satisfy 2 <= min <= max"));
        }
        if self.min_codes == 0 || self.min_codes > self.max_codes {
            return Err(Error::invalid("codes-per-visit range must satisfy 1 <= min <= max"));
        }
        if self.max_codes > self.num_leaves {
            return Err(Error::invalid("more codes per visit than leaves"));
        }
        for (name, p) in [("coherence", self.coherence), ("noise", self.noise)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::invalid("zipf exponent must be nonnegative"));
        }
        if self.case_group >= self.branching[0] {
            return Err(Error::OutOfRange {
                index: self.case_group,
                limit: self.branching[0],
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dag: OntologyDag,
    pub records: Vec<PatientRecord>,
    /// Leaves to their level-1 ancestor.
    pub groups: GroupMap,
    pub flags: BTreeMap<String, bool>,
    /// Popularity rank of every leaf, 0 = most popular.
    pub leaf_rank: Vec<usize>,
    /// Level-1 subtree active at every visit.
    pub latent: Vec<Vec<usize>>,
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

/// Balanced tree; returns the DAG and each leaf's level-1 subtree.
fn build_tree(config: &SynthConfig) -> Result<(OntologyDag, Vec<usize>)> {
    let n = config.num_leaves;
    // levels[d] holds (name, parent index in level d-1)
    let mut levels: Vec<Vec<(String, usize)>> = Vec::new();
    let top = config.branching[0];
    levels.push((0..top).map(|g| (format!("g{g:0w$}", w = width(top)), 0)).collect());
    for &b in &config.branching[1..] {
        let prev = levels.last().expect("nonempty");
        let next: Vec<(String, usize)> = prev
            .iter()
            .enumerate()
            .flat_map(|(pi, (pname, _))| (0..b).map(move |k| (format!("{pname}.{k}"), pi)))
            .collect();
        levels.push(next);
    }
    let lowest = levels.last().expect("nonempty").len();
    let leaf_parent: Vec<usize> = (0..n).map(|i| i * lowest / n).collect();

    let mut names: Vec<String> = (0..n).map(|i| format!("c{i:0w$}", w = width(n))).collect();
    let mut offsets = Vec::with_capacity(levels.len());
    let mut next = n;
    for level in &levels {
        offsets.push(next);
        next += level.len();
        names.extend(level.iter().map(|(name, _)| name.clone()));
    }
    let root = next;
    names.push("root".to_string());

    let id = ConceptId::from_index;
    let mut parents: Vec<Vec<ConceptId>> = leaf_parent
        .iter()
        .map(|&p| vec![id(offsets[levels.len() - 1] + p)])
        .collect();
    for (d, level) in levels.iter().enumerate() {
        for &(_, p) in level {
            parents.push(vec![if d == 0 { id(root) } else { id(offsets[d - 1] + p) }]);
        }
    }
    parents.push(Vec::new());

    // level-1 ancestor of each leaf
    let mut group: Vec<usize> = leaf_parent;
    for level in levels[1..].iter().rev() {
        group.iter_mut().for_each(|g| *g = level[*g].1);
    }
    Ok((OntologyDag::from_parts(names, n, parents)?, group))
}

/// Draws `k` leaves with replacement; repeats collapse.
fn draw_codes(
    rng: &mut ChaCha8Rng,
    k: usize,
    noise: f64,
    local: (&[usize], &WeightedIndex<f64>),
    global: &WeightedIndex<f64>,
) -> Vec<ConceptId> {
    let mut set = BTreeSet::new();
    for _ in 0..k {
        let leaf = if rng.gen::<f64>() < noise {
            global.sample(rng)
        } else {
            local.0[local.1.sample(rng)]
        };
        set.insert(ConceptId::from_index(leaf));
    }
    set.into_iter().collect()
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let (dag, group) = build_tree(config)?;
    let n = config.num_leaves;
    let num_groups = config.branching[0];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.shuffle(&mut rng);
    let mut leaf_rank = vec![0; n];
    for (r, &leaf) in by_rank.iter().enumerate() {
        leaf_rank[leaf] = r;
    }
    let weight: Vec<f64> = leaf_rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-config.zipf_exponent))
        .collect();
    let global = WeightedIndex::new(&weight).map_err(|e| Error::invalid(e.to_string()))?;
    let members: Vec<Vec<usize>> = (0..num_groups)
        .map(|g| (0..n).filter(|&i| group[i] == g).collect())
        .collect();
    let local: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weight[i])).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let popularity: Vec<f64> = members.iter().map(|m| m.iter().map(|&i| weight[i]).sum()).collect();
    let jump = WeightedIndex::new(&popularity).map_err(|e| Error::invalid(e.to_string()))?;

    let mut records = Vec::with_capacity(config.num_patients);
    let mut latent = Vec::with_capacity(config.num_patients);
    let mut flags = BTreeMap::new();
    for p in 0..config.num_patients {
        let t_len = rng.gen_range(config.min_visits..=config.max_visits);
        let mut state = jump.sample(&mut rng);
        let mut states = Vec::with_capacity(t_len);
        let mut visits = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t > 0 && rng.gen::<f64>() >= config.coherence {
                state = jump.sample(&mut rng);
            }
            let k = rng.gen_range(config.min_codes..=config.max_codes);
            let codes = draw_codes(&mut rng, k, config.noise, (&members[state], &local[state]), &global);
            visits.push(Visit::new(codes)?);
            states.push(state);
        }
        let id = format!("p{p:0w$}", w = width(config.num_patients));
        flags.insert(id.clone(), states.contains(&config.case_group));
        records.push(PatientRecord { patient_id: id, visits });
        latent.push(states);
    }

    let group_names = (0..num_groups)
        .map(|g| dag.name(ConceptId::from_index(n + g)).to_string())
        .collect();
    Ok(SynthDataset {
        groups: GroupMap::new(group, group_names)?,
        dag,
        records,
        flags,
        leaf_rank,
        latent,
    })
}

/// Basic dataset statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub patients: usize,
    pub visits: usize,
    pub avg_visits_per_patient: f64,
    pub avg_codes_per_visit: f64,
    pub max_codes_per_visit: usize,
    pub unique_codes: usize,
}

pub fn describe(records: &[PatientRecord]) -> DatasetStats {
    let visits: usize = records.iter().map(|r| r.visits.len()).sum();
    let codes: usize = records.iter().flat_map(|r| &r.visits).map(Visit::len).sum();
    let unique: BTreeSet<ConceptId> = records
        .iter()
        .flat_map(|r| &r.visits)
        .flat_map(|v| v.codes().iter().copied())
        .collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DatasetStats {
        patients: records.len(),
        visits,
        avg_visits_per_patient: ratio(visits, records.len()),
        avg_codes_per_visit: ratio(codes, visits),
        max_codes_per_visit: records.iter().flat_map(|r| &r.visits).map(Visit::len).max().unwrap_or(0),
        unique_codes: unique.len(),
    }
}

pub const ONTOLOGY_FILE: &str = "ontology.tsv";
pub const RECORDS_FILE: &str = "records.csv";
pub const GROUPS_FILE: &str = "groups.csv";
pub const FLAGS_FILE: &str = "flags.csv";
pub const STATS_FILE: &str = "stats.json";

impl SynthDataset {
    /// Writes the ontology, records, group map, flags and statistics into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path).map_err(|e| Error::io(path, e))
        };
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write(ONTOLOGY_FILE, format!("# child\tparent\n{}", self.dag.to_edge_list()))?;
        write_records(std::io::BufWriter::new(create(RECORDS_FILE)?), &self.records, &self.dag)?;
        write_group_map(create(GROUPS_FILE)?, &self.groups, &self.dag)?;
        write_flags(create(FLAGS_FILE)?, &self.flags)?;
        write(STATS_FILE, serde_json::to_string_pretty(&describe(&self.records))? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::ancestors;

    fn small() -> SynthConfig {
        SynthConfig {
            num_leaves: 40,
            branching: vec![4, 2],
            num_patients: 300,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_preset_shape() {
        let data = generate(&SynthConfig::default()).unwrap();
        assert_eq!(data.dag.num_leaves(), 400);
        assert_eq!(data.dag.num_internal(), 32 + 96 + 1);
        assert_eq!(data.groups.num_groups(), 32);
        assert_eq!(data.records.len(), 2000);
        for leaf in data.dag.leaves() {
            assert_eq!(ancestors(&data.dag, leaf).unwrap().len(), 4);
            let g = data.groups.group(leaf);
            let anc = ancestors(&data.dag, leaf).unwrap();
            assert!(anc.iter().any(|&c| data.dag.name(c) == data.groups.group_name(g)));
        }
        for r in &data.records {
            assert!((4..=12).contains(&r.visits.len()));
            assert!(r.visits.iter().all(|v| (1..=4).contains(&v.len())));
        }
    }

    #[test]
    fn uniform_popularity_without_skew() {
        let cfg = SynthConfig {
            zipf_exponent: 0.0,
            noise: 0.0,
            num_patients: 1500,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        let mut counts = vec![0usize; 40];
        let mut draws = 0;
        for v in data.records.iter().flat_map(|r| &r.visits) {
            for c in v.codes() {
                counts[c.index()] += 1;
                draws += 1;
            }
        }
        assert!(draws >= 10_000, "{draws}");
        let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        assert!((hi as f64) / (lo as f64) < 3.0, "{lo}..{hi}");
    }

    #[test]
    fn full_coherence_keeps_the_subtree() {
        let cfg = SynthConfig {
            coherence: 1.0,
            noise: 0.0,
            ..small()
        };
        let data = generate(&cfg).unwrap();
        for r in &data.records {
            let groups: BTreeSet<usize> = r
                .visits
                .iter()
                .flat_map(|v| v.codes().iter().map(|&c| data.groups.group(c)))
                .collect();
            assert_eq!(groups.len(), 1);
        }
    }

    #[test]
    fn same_seed_same_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&small()).unwrap().write_to(a.path()).unwrap();
        generate(&small()).unwrap().write_to(b.path()).unwrap();
        for f in [ONTOLOGY_FILE, RECORDS_FILE, GROUPS_FILE, FLAGS_FILE, STATS_FILE] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn describe_examples() {
        let v = |codes: &[u32]| Visit::new(codes.iter().map(|&c| ConceptId(c)).collect()).unwrap();
        let records = vec![
            PatientRecord {
                patient_id: "a".into(),
                visits: vec![v(&[0]), v(&[1, 2]), v(&[0])],
            },
            PatientRecord {
                patient_id: "b".into(),
                visits: vec![v(&[3]), v(&[0, 1, 2, 4]), v(&[1]), v(&[2]), v(&[0])],
            },
        ];
        let s = describe(&records);
        assert_eq!(s.avg_visits_per_patient, 4.0);
        assert_eq!(s.unique_codes, 5);
        assert_eq!(s.max_codes_per_visit, 4);
        assert_eq!(s.avg_codes_per_visit, 12.0 / 8.0);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        for cfg in [
            SynthConfig { max_codes: 41, ..small() },
            SynthConfig { branching: vec![4], ..small() },
            SynthConfig { min_visits: 1, ..small() },
            SynthConfig { coherence: 1.5, ..small() },
            SynthConfig { num_leaves: 5, ..small() },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }
}
