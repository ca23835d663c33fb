//! Subcommand front end for the `gram` binary.

mod error;
pub mod hpo;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use gram::ehr::{
    label_frequencies, load_flags, load_group_map, load_records, split_dataset, DatasetSplit, GroupMap,
    PatientRecord, Task, DEFAULT_SPLIT,
};
use gram::evaluation::{evaluate, export_attention, export_embeddings, DEFAULT_KS};
use gram::glove::glove_fit;
use gram::ontology::{load_category_labels, parse_ontology, OntologyDag};
use gram::synth::{describe, generate, SynthConfig, FLAGS_FILE, GROUPS_FILE, ONTOLOGY_FILE, RECORDS_FILE};
use gram::training::{
    model_dims, model_inputs, param_count, pretraining_cooccurrence, train, InitMode, ModelKind, TrainConfig,
    TrainedModel,
};

pub use error::{CliError, Result};
use hpo::{SearchSpace, TrialResult};

pub const COOCCURRENCE_FILE: &str = "cooccurrence.tsv";
pub const GLOVE_FILE: &str = "glove.tsv";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const DIVERGED_FILE: &str = "last_good.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const ATTENTION_FILE: &str = "attention.json";
pub const HPO_FILE: &str = "hpo.csv";
pub const HPO_BEST_FILE: &str = "hpo_best.toml";

#[derive(Debug, Parser)]
#[command(name = "gram", version, about = "Graph-based attention models over medical ontologies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ontology and patient dataset.
    GenSynth(GenSynthArgs),
    /// Count ancestor-augmented co-occurrences over the training split.
    BuildCooc(ModelArgs),
    /// Fit GloVe vectors to the co-occurrence matrix.
    InitEmbeddings(ModelArgs),
    /// Train a model and write its best checkpoint and loss log.
    Train(ModelArgs),
    /// Score the test split with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write the final representation of every input code.
    ExportEmbeddings(ExportEmbeddingsArgs),
    /// Write attention weights for selected codes.
    ExportAttention(ExportAttentionArgs),
    /// Count the trainable parameters of a configuration.
    ParamCount(ModelArgs),
    /// Random hyperparameter search, ranked by validation loss.
    HpoSearch(HpoArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Directory holding ontology.tsv, records.csv and optionally groups.csv and flags.csv.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// gram, random_dag, rnn, simple_rollup or rollup_rare.
    #[arg(long)]
    model: Option<ModelKind>,
    /// random, glove_augmented or glove_leaf_only.
    #[arg(long)]
    init: Option<InitMode>,
    /// sequential or binary.
    #[arg(long)]
    task: Option<Task>,
    /// Minimum visit count for rollup_rare to keep a code.
    #[arg(long)]
    threshold: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    k: Vec<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportEmbeddingsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Two-column TSV of code name and category label.
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated code names.
    #[arg(long, value_delimiter = ',', required = true)]
    leaves: Vec<String>,
    /// Leave the root out and report its weight as a residual.
    #[arg(long)]
    drop_root: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HpoArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// TOML file listing candidate values per hyperparameter.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, default_value_t = hpo::DEFAULT_TRIALS)]
    trials: usize,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<Value> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::BuildCooc(a) => build_cooc(a),
        Command::InitEmbeddings(a) => init_embeddings(a),
        Command::Train(a) => train_command(a),
        Command::Evaluate(a) => evaluate_command(a),
        Command::ExportEmbeddings(a) => export_embeddings_command(a),
        Command::ExportAttention(a) => export_attention_command(a),
        Command::ParamCount(a) => param_count_command(a),
        Command::HpoSearch(a) => hpo_search(a),
    }
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|source| CliError::Toml {
        path: path.to_path_buf(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir)
        .and_then(|()| std::fs::write(&path, contents))
        .map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    Ok(path)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))
}

struct Dataset {
    dag: OntologyDag,
    records: Vec<PatientRecord>,
    groups: GroupMap,
    flags: Option<BTreeMap<String, bool>>,
}

impl Dataset {
    fn load(dir: &Path) -> Result<Self> {
        let dag = parse_ontology(dir.join(ONTOLOGY_FILE))?;
        let records = load_records(dir.join(RECORDS_FILE), &dag)?.records;
        let groups_path = dir.join(GROUPS_FILE);
        let groups = if groups_path.exists() {
            load_group_map(groups_path, &dag)?
        } else {
            GroupMap::identity(&dag)
        };
        let flags_path = dir.join(FLAGS_FILE);
        let flags = if flags_path.exists() { Some(load_flags(flags_path)?) } else { None };
        Ok(Dataset {
            dag,
            records,
            groups,
            flags,
        })
    }

    fn split(&self, seed: u64) -> Result<DatasetSplit> {
        Ok(split_dataset(&self.records, DEFAULT_SPLIT, seed)?)
    }

    fn flags_for(&self, task: Task) -> Result<Option<&BTreeMap<String, bool>>> {
        match (task, &self.flags) {
            (Task::Sequential, _) => Ok(None),
            (Task::Binary, Some(f)) => Ok(Some(f)),
            (Task::Binary, None) => Err(CliError::Usage(format!("the binary task needs {FLAGS_FILE} in the data directory"))),
        }
    }
}

impl ModelArgs {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut config: TrainConfig = read_toml(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(model) = self.model {
            config.model = model;
        }
        if let Some(init) = self.init {
            config.init = init;
        }
        if let Some(task) = self.task {
            config.task = task;
        }
        if let Some(threshold) = self.threshold {
            config.rollup_threshold = threshold;
        }
        config.validate()?;
        Ok(config)
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<Value> {
    let mut config: SynthConfig = read_toml(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let data = generate(&config)?;
    data.write_to(&a.out)?;
    let stats = describe(&data.records);
    Ok(json!({
        "command": "gen-synth",
        "out": a.out,
        "seed": config.seed,
        "leaves": data.dag.num_leaves(),
        "nodes": data.dag.num_nodes(),
        "groups": data.groups.num_groups(),
        "stats": stats,
    }))
}

fn build_cooc(a: ModelArgs) -> Result<Value> {
    let config = a.train_config()?;
    let data = Dataset::load(&a.data)?;
    let split = data.split(config.seed)?;
    let inputs = model_inputs(&config, &data.dag, &split.train)?;
    let m = pretraining_cooccurrence(config.model, &inputs, &split.train)?;
    let path = write(&a.out, COOCCURRENCE_FILE, &m.to_snapshot())?;
    Ok(json!({
        "command": "build-cooc",
        "model": config.model,
        "dim": m.dim(),
        "nonzero": m.nnz(),
        "train_patients": split.train.len(),
        "output": path,
    }))
}

fn init_embeddings(a: ModelArgs) -> Result<Value> {
    let config = a.train_config()?;
    let data = Dataset::load(&a.data)?;
    let split = data.split(config.seed)?;
    let inputs = model_inputs(&config, &data.dag, &split.train)?;
    let m = pretraining_cooccurrence(config.model, &inputs, &split.train)?;
    let fit = glove_fit(&m, &config.glove_config())?;
    let path = write(&a.out, GLOVE_FILE, &fit.embeddings.to_tsv(&inputs.row_names))?;
    Ok(json!({
        "command": "init-embeddings",
        "model": config.model,
        "rows": fit.embeddings.len(),
        "dim": fit.embeddings.dim(),
        "epochs": fit.losses.len(),
        "final_loss": fit.losses.last(),
        "output": path,
    }))
}

fn train_command(a: ModelArgs) -> Result<Value> {
    let config = a.train_config()?;
    let data = Dataset::load(&a.data)?;
    let split = data.split(config.seed)?;
    let flags = data.flags_for(config.task)?;
    let (model, report) = match train(&config, &split, &data.groups, flags, &data.dag) {
        Ok(out) => out,
        Err(gram::Error::Diverged { epoch, last_good }) => {
            write(&a.out, DIVERGED_FILE, &last_good.to_json()?)?;
            return Err(gram::Error::Diverged { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let checkpoint = write(&a.out, CHECKPOINT_FILE, &model.to_json()?)?;
    let log = write(&a.out, TRAIN_LOG_FILE, &report.to_csv())?;
    Ok(json!({
        "command": "train",
        "model": config.model,
        "init": config.init,
        "task": config.task,
        "seed": config.seed,
        "params": model.params().count(),
        "epochs": report.epochs.len(),
        "best_epoch": report.best_epoch,
        "best_valid_loss": report.best_valid_loss,
        "checkpoint": checkpoint,
        "log": log,
    }))
}

fn evaluate_command(a: EvaluateArgs) -> Result<Value> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let split = data.split(a.seed.unwrap_or(model.config.seed))?;
    let freq = label_frequencies(&split.train, &data.groups);
    let report = evaluate(&model, &split.test, &data.groups, data.flags_for(model.task())?, &freq, &a.k)?;
    let path = write(&a.out, EVAL_FILE, &to_json(&report)?)?;
    let accuracy: BTreeMap<String, f64> = report
        .accuracy_at_k
        .iter()
        .map(|s| (format!("@{}", s.k), s.accuracy))
        .collect();
    Ok(json!({
        "command": "evaluate",
        "task": model.task(),
        "test_patients": split.test.len(),
        "accuracy": accuracy,
        "auc": report.auc,
        "output": path,
    }))
}

fn export_embeddings_command(a: ExportEmbeddingsArgs) -> Result<Value> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let categories = a.categories.as_deref().map(load_category_labels).transpose()?;
    let tsv = export_embeddings(&model, categories.as_ref());
    let path = write(&a.out, EMBEDDINGS_FILE, &tsv)?;
    Ok(json!({
        "command": "export-embeddings",
        "rows": tsv.lines().count(),
        "dim": model.dims.embedding,
        "output": path,
    }))
}

fn export_attention_command(a: ExportAttentionArgs) -> Result<Value> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let leaves: Vec<&str> = a.leaves.iter().map(String::as_str).collect();
    let export = export_attention(&model, &leaves, a.drop_root)?;
    let path = write(&a.out, ATTENTION_FILE, &to_json(&export)?)?;
    Ok(json!({
        "command": "export-attention",
        "leaves": export.len(),
        "drop_root": a.drop_root,
        "output": path,
    }))
}

fn param_count_command(a: ModelArgs) -> Result<Value> {
    let config = a.train_config()?;
    let data = Dataset::load(&a.data)?;
    let split = data.split(config.seed)?;
    let inputs = model_inputs(&config, &data.dag, &split.train)?;
    let dims = model_dims(&config, &inputs, data.groups.num_groups());
    Ok(json!({
        "command": "param-count",
        "model": config.model,
        "rows": dims.rows,
        "inputs": inputs.num_inputs(),
        "outputs": dims.outputs,
        "params": param_count(&dims),
    }))
}

fn hpo_search(a: HpoArgs) -> Result<Value> {
    let base = a.model.train_config()?;
    let space: SearchSpace = read_toml(a.space.as_deref())?;
    if a.trials == 0 {
        return Err(CliError::Usage("need at least one trial".to_string()));
    }
    let trials = space.sample(a.trials, base.seed)?;
    let data = Dataset::load(&a.model.data)?;
    let split = data.split(base.seed)?;
    let flags = data.flags_for(base.task)?;
    let mut results = Vec::with_capacity(trials.len());
    for (index, trial) in trials.iter().enumerate() {
        let config = trial.apply(&base);
        config.validate()?;
        let (_, report) = train(&config, &split, &data.groups, flags, &data.dag)?;
        results.push(TrialResult {
            index,
            trial: *trial,
            best_epoch: report.best_epoch,
            best_valid_loss: report.best_valid_loss,
        });
    }
    hpo::rank(&mut results);
    let best = &results[0];
    let best_config = best.trial.apply(&base);
    let csv = write(&a.model.out, HPO_FILE, &hpo::to_csv(&results))?;
    let toml_text = toml::to_string(&best_config).map_err(|e| CliError::Usage(e.to_string()))?;
    let best_path = write(&a.model.out, HPO_BEST_FILE, &toml_text)?;
    Ok(json!({
        "command": "hpo-search",
        "trials": results.len(),
        "best_trial": best.index,
        "best_valid_loss": best.best_valid_loss,
        "best": best.trial,
        "ranking": csv,
        "best_config": best_path,
    }))
}
