//! Mini-batch training with early stopping, model checkpoints, and the
//! baseline constructions (random hierarchy, plain RNN, code roll-ups).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooccurrence::{build_cooccurrence, build_leaf_cooccurrence, SparseCooccurrence};
use crate::ehr::{build_labels, DatasetSplit, GroupMap, Labels, PatientRecord, Task, Visit};
use crate::error::{Error, Result};
use crate::glove::{glove_fit, GloveConfig};
use crate::linalg::Matrix;
use crate::model::{
    batch_gradient, batch_loss, embedding_matrix, Example, ModelDims, ModelState, Params,
    StepOptions, Target,
};
use crate::ontology::{AncestorMap, ConceptId, OntologyDag};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    /// GloVe on ancestor-augmented co-occurrence (all DAG nodes).
    GloveAugmented,
    /// GloVe on raw within-visit co-occurrence of the input vocabulary.
    GloveLeafOnly,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "glove_augmented" => Ok(InitMode::GloveAugmented),
            "glove_leaf_only" => Ok(InitMode::GloveLeafOnly),
            other => Err(Error::invalid(format!("unknown init mode `{other}`"))),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gram,
    RandomDag,
    Rnn,
    SimpleRollup,
    RollupRare,
}

impl ModelKind {
    pub fn uses_attention(self) -> bool {
        matches!(self, ModelKind::Gram | ModelKind::RandomDag)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gram" => Ok(ModelKind::Gram),
            "random_dag" => Ok(ModelKind::RandomDag),
            "rnn" => Ok(ModelKind::Rnn),
            "simple_rollup" => Ok(ModelKind::SimpleRollup),
            "rollup_rare" => Ok(ModelKind::RollupRare),
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `m`
    pub embedding_dim: usize,
    /// `r`
    pub hidden_dim: usize,
    /// `l`
    pub attention_dim: usize,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub init: InitMode,
    pub model: ModelKind,
    pub rollup_threshold: u64,
    pub task: Task,
    pub glove_epochs: usize,
    pub glove_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 100,
            hidden_dim: 100,
            attention_dim: 100,
            l2: 0.001,
            dropout: 0.2,
            batch_size: 100,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            init: InitMode::Random,
            model: ModelKind::Gram,
            rollup_threshold: 10,
            task: Task::Sequential,
            glove_epochs: 50,
            glove_learning_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid(format!("L2 coefficient {} must be nonnegative", self.l2)));
        }
        match (self.init, self.model.uses_attention()) {
            (InitMode::GloveAugmented, false) => Err(Error::invalid(
                "glove_augmented initialization needs an attention model (gram or random_dag)",
            )),
            (InitMode::GloveLeafOnly, true) => Err(Error::invalid(
                "glove_leaf_only initialization applies to models without attention",
            )),
            _ => Ok(()),
        }
    }

    pub fn glove_config(&self) -> GloveConfig {
        GloveConfig {
            dim: self.embedding_dim,
            epochs: self.glove_epochs,
            learning_rate: self.glove_learning_rate,
            seed: self.seed ^ 0x6a09_e667_f3bc_c908,
            ..GloveConfig::default()
        }
    }
}

/// Maps original records into model rows and holds the attention support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInputs {
    /// Input row for every leaf of the original DAG.
    pub input_map: Vec<usize>,
    /// Attention support per input row over embedding rows.
    pub support: AncestorMap,
    /// Name of every embedding row.
    pub row_names: Vec<String>,
    /// Embedding row of the hierarchy root, for models that attend over one.
    pub root: Option<usize>,
}

impl ModelInputs {
    pub fn num_inputs(&self) -> usize {
        self.support.len()
    }

    pub fn num_rows(&self) -> usize {
        self.support.num_nodes()
    }

    /// Name of input row `i`, which is also embedding row `i`.
    pub fn input_name(&self, i: usize) -> &str {
        &self.row_names[i]
    }

    fn map_visit(&self, visit: &Visit) -> Vec<usize> {
        let set: BTreeSet<usize> = visit.codes().iter().map(|c| self.input_map[c.index()]).collect();
        set.into_iter().collect()
    }

    /// Model inputs for one patient; targets always come from the original
    /// codes.
    pub fn example(&self, record: &PatientRecord, groups: &GroupMap, task: Task, flag: bool) -> Result<Example> {
        let visits = record.visits.iter().map(|v| self.map_visit(v)).collect();
        let target = match build_labels(record, groups, task, flag) {
            Labels::Sequential(steps) => Target::Sequential(steps),
            Labels::Binary(b) => Target::Binary(b),
        };
        Example::new(visits, target)
    }

    pub fn examples(
        &self,
        records: &[PatientRecord],
        groups: &GroupMap,
        task: Task,
        flags: Option<&BTreeMap<String, bool>>,
    ) -> Result<Vec<Example>> {
        records
            .iter()
            .map(|r| {
                let flag = match (task, flags) {
                    (Task::Sequential, _) => false,
                    (Task::Binary, Some(f)) => *f.get(&r.patient_id).ok_or_else(|| {
                        Error::invalid(format!("no binary label for patient `{}`", r.patient_id))
                    })?,
                    (Task::Binary, None) => return Err(Error::invalid("binary task needs a flags file")),
                };
                self.example(r, groups, task, flag)
            })
            .collect()
    }

    /// Records rewritten into input-row ids, for co-occurrence over the
    /// model vocabulary.
    /// Records rewritten over input rows.
    pub fn mapped_records(&self, records: &[PatientRecord]) -> Result<Vec<PatientRecord>> {
        records
            .iter()
            .map(|r| {
                let visits = r
                    .visits
                    .iter()
                    .map(|v| Visit::new(self.map_visit(v).into_iter().map(ConceptId::from_index).collect()))
                    .collect::<Result<_>>()?;
                Ok(PatientRecord {
                    patient_id: r.patient_id.clone(),
                    visits,
                })
            })
            .collect()
    }
}

/// Per-node replacement used by the roll-up baselines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RollupMap {
    target: Vec<ConceptId>,
}

impl RollupMap {
    /// Every non-root node goes to its direct parent.
    pub fn simple(dag: &OntologyDag) -> Self {
        let target = (0..dag.num_nodes())
            .map(ConceptId::from_index)
            .map(|c| dag.direct_parent(c).unwrap_or(c))
            .collect();
        RollupMap { target }
    }

    /// Nodes seen in fewer than `threshold` visits of `train` go to their
    /// direct parent; the rest stay.
    pub fn rare(train: &[PatientRecord], dag: &OntologyDag, threshold: u64) -> Self {
        let mut freq = vec![0u64; dag.num_nodes()];
        for v in train.iter().flat_map(|r| &r.visits) {
            for c in v.codes() {
                freq[c.index()] += 1;
            }
        }
        let target = (0..dag.num_nodes())
            .map(ConceptId::from_index)
            .map(|c| {
                if freq[c.index()] < threshold {
                    dag.direct_parent(c).unwrap_or(c)
                } else {
                    c
                }
            })
            .collect();
        RollupMap { target }
    }

    pub fn map(&self, code: ConceptId) -> ConceptId {
        self.target[code.index()]
    }

    pub fn apply(&self, records: &[PatientRecord]) -> Vec<PatientRecord> {
        records
            .iter()
            .map(|r| PatientRecord {
                patient_id: r.patient_id.clone(),
                visits: r
                    .visits
                    .iter()
                    .map(|v| Visit::new(v.codes().iter().map(|&c| self.map(c)).collect()).expect("nonempty"))
                    .collect(),
            })
            .collect()
    }

    /// Sorted distinct images of the leaves.
    pub fn vocabulary(&self, dag: &OntologyDag) -> Vec<ConceptId> {
        let set: BTreeSet<ConceptId> = dag.leaves().map(|c| self.map(c)).collect();
        set.into_iter().collect()
    }
}

/// Replaces every code with its direct parent.
pub fn rollup_simple(records: &[PatientRecord], dag: &OntologyDag) -> Vec<PatientRecord> {
    RollupMap::simple(dag).apply(records)
}

/// Replaces codes seen in fewer than `threshold` visits of `records` with
/// their direct parent.
pub fn rollup_rare(records: &[PatientRecord], dag: &OntologyDag, threshold: u64) -> Vec<PatientRecord> {
    RollupMap::rare(records, dag, threshold).apply(records)
}

/// Gives every leaf four distinct random internal ancestors plus the root.
///
/// The sampled nodes hang directly below the root, so each leaf's support is
/// itself, its four nodes and the root. Internal nodes nobody sampled are
/// dropped; leaf ids and names are preserved.
pub fn make_random_dag(dag: &OntologyDag, seed: u64) -> Result<OntologyDag> {
    const SAMPLED: usize = 4;
    let root = dag.root();
    let candidates: Vec<ConceptId> = (dag.num_leaves()..dag.num_nodes())
        .map(ConceptId::from_index)
        .filter(|&c| c != root)
        .collect();
    if candidates.len() < SAMPLED {
        return Err(Error::invalid(format!(
            "a random hierarchy needs at least {} internal nodes, found {}",
            SAMPLED + 1,
            dag.num_internal()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let picks: Vec<Vec<ConceptId>> = dag
        .leaves()
        .map(|_| {
            let mut p: Vec<ConceptId> = index::sample(&mut rng, candidates.len(), SAMPLED)
                .into_iter()
                .map(|k| candidates[k])
                .collect();
            p.sort_unstable();
            p
        })
        .collect();
    let used: BTreeSet<ConceptId> = picks.iter().flatten().copied().collect();
    let internal: Vec<ConceptId> = used.iter().copied().chain([root]).collect();
    let new_id: BTreeMap<ConceptId, ConceptId> = internal
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, ConceptId::from_index(dag.num_leaves() + k)))
        .collect();
    let new_root = new_id[&root];
    let mut names: Vec<String> = dag.leaves().map(|c| dag.name(c).to_string()).collect();
    names.extend(internal.iter().map(|&c| dag.name(c).to_string()));
    let mut parents: Vec<Vec<ConceptId>> = picks
        .iter()
        .map(|p| p.iter().map(|c| new_id[c]).collect())
        .collect();
    parents.extend(used.iter().map(|_| vec![new_root]));
    parents.push(Vec::new());
    OntologyDag::from_parts(names, dag.num_leaves(), parents)
}

/// Input layout for `config.model`.
pub fn model_inputs(config: &TrainConfig, dag: &OntologyDag, train: &[PatientRecord]) -> Result<ModelInputs> {
    let identity: Vec<usize> = (0..dag.num_leaves()).collect();
    let rollup = |map: RollupMap| {
        let vocab = map.vocabulary(dag);
        let pos: BTreeMap<ConceptId, usize> = vocab.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        ModelInputs {
            input_map: dag.leaves().map(|c| pos[&map.map(c)]).collect(),
            support: AncestorMap::identity(vocab.len()),
            row_names: vocab.iter().map(|&c| dag.name(c).to_string()).collect(),
            root: None,
        }
    };
    Ok(match config.model {
        ModelKind::Gram => ModelInputs {
            input_map: identity,
            support: AncestorMap::build(dag),
            row_names: dag.names().to_vec(),
            root: Some(dag.root().index()),
        },
        ModelKind::RandomDag => {
            let random = make_random_dag(dag, config.seed)?;
            ModelInputs {
                input_map: identity,
                support: AncestorMap::build(&random),
                row_names: random.names().to_vec(),
                root: Some(random.root().index()),
            }
        }
        ModelKind::Rnn => ModelInputs {
            input_map: identity,
            support: AncestorMap::identity(dag.num_leaves()),
            row_names: dag.leaves().map(|c| dag.name(c).to_string()).collect(),
            root: None,
        },
        ModelKind::SimpleRollup => rollup(RollupMap::simple(dag)),
        ModelKind::RollupRare => rollup(RollupMap::rare(train, dag, config.rollup_threshold)),
    })
}

pub fn model_dims(config: &TrainConfig, inputs: &ModelInputs, num_groups: usize) -> ModelDims {
    ModelDims {
        rows: inputs.num_rows(),
        embedding: config.embedding_dim,
        attention: config.model.uses_attention().then_some(config.attention_dim),
        hidden: config.hidden_dim,
        outputs: ModelDims::output_size(config.task, num_groups),
    }
}

/// Number of trainable values for the given shapes.
pub fn param_count(dims: &ModelDims) -> usize {
    let (m, r) = (dims.embedding, dims.hidden);
    let attention = dims.attention.map_or(0, |l| l * 2 * m + 2 * l);
    dims.rows * m + attention + 3 * (r * m + r * r + r) + dims.outputs * (r + 1)
}

pub const CHECKPOINT_FORMAT: &str = "gram-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to evaluate or resume a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub inputs: ModelInputs,
    pub label_names: Vec<String>,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
    pub state: ModelState,
}

impl TrainedModel {
    pub fn params(&self) -> &Params {
        &self.state.params
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// Final representation of every input row.
    pub fn representations(&self) -> Matrix {
        embedding_matrix(&self.state.params, &self.inputs.support)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(text)?;
        if model.format != CHECKPOINT_FORMAT || model.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                model.format, model.version
            )));
        }
        if model.state.params.dims() != model.dims {
            return Err(Error::invalid("checkpoint shapes do not match its header"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Loss of the GloVe fit per epoch, when one ran.
    pub glove_losses: Vec<f64>,
}

impl TrainReport {
    /// `epoch,train_loss,valid_loss,seconds`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{:.3}", e.epoch, e.train_loss, e.valid_loss, e.seconds);
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Co-occurrence matrix the GloVe phase fits for `model`: ancestor-augmented
/// over the attention support, or plain over the input rows otherwise.
pub fn pretraining_cooccurrence(
    model: ModelKind,
    inputs: &ModelInputs,
    train: &[PatientRecord],
) -> Result<SparseCooccurrence> {
    if model.uses_attention() {
        Ok(build_cooccurrence(train, &inputs.support))
    } else {
        Ok(build_leaf_cooccurrence(&inputs.mapped_records(train)?, inputs.num_inputs()))
    }
}

/// Builds the input layout and initial parameters, running the GloVe phase
/// when configured.
pub fn initialize(
    config: &TrainConfig,
    dag: &OntologyDag,
    train: &[PatientRecord],
    num_groups: usize,
) -> Result<(ModelInputs, Params, Vec<f64>)> {
    config.validate()?;
    let inputs = model_inputs(config, dag, train)?;
    let dims = model_dims(config, &inputs, num_groups);
    let mut params = Params::random(&dims, &mut stream(config.seed, 1));
    let mut glove_losses = Vec::new();
    if config.init != InitMode::Random {
        let m = pretraining_cooccurrence(config.model, &inputs, train)?;
        let fit = glove_fit(&m, &config.glove_config())?;
        let rows = fit.embeddings.len().min(params.embeddings.rows());
        for i in 0..rows {
            params.embeddings.row_mut(i).copy_from_slice(fit.embeddings.vectors.row(i));
        }
        glove_losses = fit.losses;
    }
    Ok((inputs, params, glove_losses))
}

/// Trains with shuffled mini-batches and Adadelta, stopping once validation
/// loss has not improved for `patience` epochs. Returns the best epoch's
/// model.
pub fn train(
    config: &TrainConfig,
    split: &DatasetSplit,
    groups: &GroupMap,
    flags: Option<&BTreeMap<String, bool>>,
    dag: &OntologyDag,
) -> Result<(TrainedModel, TrainReport)> {
    if split.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let (inputs, params, glove_losses) = initialize(config, dag, &split.train, groups.num_groups())?;
    let train_ex = inputs.examples(&split.train, groups, config.task, flags)?;
    let valid_ex = inputs.examples(&split.validation, groups, config.task, flags)?;
    let dims = params.dims();
    let mut state = ModelState::new(params);
    let snapshot = |state: &ModelState, epoch: usize| TrainedModel {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        dims,
        inputs: inputs.clone(),
        label_names: match config.task {
            Task::Sequential => groups.group_names().to_vec(),
            Task::Binary => vec!["positive".to_string()],
        },
        epoch,
        state: state.clone(),
    };
    let validation_loss = |p: &Params| {
        if valid_ex.is_empty() {
            batch_loss(p, &inputs.support, &train_ex)
        } else {
            batch_loss(p, &inputs.support, &valid_ex)
        }
    };

    let mut best = snapshot(&state, 0);
    let mut best_loss = validation_loss(&state.params);
    let mut shuffle_rng = stream(config.seed, 2);
    let mut dropout_rng = stream(config.seed, 3);
    let opts = StepOptions {
        dropout: config.dropout,
        l2: config.l2,
    };
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut epochs = Vec::new();
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&k| &train_ex[k]).collect();
            let (loss, grads) = match batch_gradient(&state.params, &inputs.support, &batch, &opts, &mut dropout_rng) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, best)),
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
            state.step(&grads);
            if state.params.first_non_finite().is_some() {
                return Err(diverged(epoch, best));
            }
        }
        let train_loss = total / train_ex.len() as f64;
        let valid_loss = validation_loss(&state.params);
        if !train_loss.is_finite() || !valid_loss.is_finite() {
            return Err(diverged(epoch, best));
        }
        let seconds = start.elapsed().as_secs_f64();
        info!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6} ({seconds:.2}s)");
        epochs.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
            seconds,
        });
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best = snapshot(&state, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale > config.patience {
                break;
            }
        }
    }
    Ok((
        best,
        TrainReport {
            epochs,
            best_epoch,
            best_valid_loss: best_loss,
            glove_losses,
        },
    ))
}

fn diverged(epoch: usize, last_good: TrainedModel) -> Error {
    Error::Diverged {
        epoch,
        last_good: Box::new(last_good),
    }
}
