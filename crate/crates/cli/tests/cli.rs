use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gram")).args(args).output().unwrap()
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(&text).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SYNTH: &str = "num_leaves = 60\nbranching = [6, 2]\nnum_patients = 120\n";
const SMALL_TRAIN: &str = "embedding_dim = 8\nhidden_dim = 8\nattention_dim = 6\nmax_epochs = 2\nglove_epochs = 3\nbatch_size = 20\n";

/// Small synthetic dataset plus a small training config.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let synth = dir.join("synth.toml");
    std::fs::write(&synth, SMALL_SYNTH).unwrap();
    let data = dir.join("data");
    summary(&gram(&["gen-synth", "--config", p(&synth), "--seed", "3", "--out", p(&data)]));
    let config = dir.join("train.toml");
    std::fs::write(&config, SMALL_TRAIN).unwrap();
    (data, config)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = summary(&gram(&["gen-synth", "--seed", "7", "--out", p(&a)]));
    summary(&gram(&["gen-synth", "--seed", "7", "--out", p(&b)]));
    assert_eq!(first["leaves"], 400);
    assert_eq!(first["seed"], 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 5);
    assert_eq!(ta, tb);
    let c = dir.path().join("c");
    summary(&gram(&["gen-synth", "--seed", "8", "--out", p(&c)]));
    assert_ne!(tree(&c), ta);
}

#[test]
fn train_evaluate_and_export_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out = dir.path().join("run");
    let s = summary(&gram(&[
        "train", "--data", p(&data), "--config", p(&config), "--model", "gram", "--init", "glove_augmented",
        "--seed", "5", "--out", p(&out),
    ]));
    assert_eq!(s["model"], "gram");
    assert_eq!(s["init"], "glove_augmented");
    assert_eq!(s["epochs"], 2);
    let checkpoint = out.join("model.json");
    assert!(checkpoint.exists());
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss,valid_loss,seconds"));

    let counted = summary(&gram(&["param-count", "--data", p(&data), "--config", p(&config), "--model", "gram"]));
    assert_eq!(counted["params"], s["params"]);

    let e = summary(&gram(&["evaluate", "--data", p(&data), "--checkpoint", p(&checkpoint), "--k", "1,3", "--out", p(&out)]));
    assert!(e["accuracy"]["@3"].as_f64().unwrap() >= e["accuracy"]["@1"].as_f64().unwrap());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    for key in ["accuracy_at_k", "bins", "auc", "label_detail"] {
        assert!(report.get(key).is_some(), "{key}");
    }

    let x = summary(&gram(&["export-embeddings", "--checkpoint", p(&checkpoint), "--out", p(&out)]));
    assert_eq!(x["rows"], 60);
    let a = summary(&gram(&["export-attention", "--checkpoint", p(&checkpoint), "--leaves", "c00,c10", "--drop-root", "--out", p(&out)]));
    assert_eq!(a["leaves"], 2);
    let att: Value = serde_json::from_str(&std::fs::read_to_string(out.join("attention.json")).unwrap()).unwrap();
    assert_eq!(att[0]["leaf"], "c00");
    assert!(att[0]["residual"].is_f64());

    let missing = gram(&["export-attention", "--checkpoint", p(&checkpoint), "--leaves", "nope", "--out", p(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn pretraining_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out = dir.path().join("pre");
    let c = summary(&gram(&["build-cooc", "--data", p(&data), "--config", p(&config), "--out", p(&out)]));
    assert!(c["nonzero"].as_u64().unwrap() > 0);
    assert!(out.join("cooccurrence.tsv").exists());
    let g = summary(&gram(&["init-embeddings", "--data", p(&data), "--config", p(&config), "--out", p(&out)]));
    assert_eq!(g["dim"], 8);
    let tsv = std::fs::read_to_string(out.join("glove.tsv")).unwrap();
    assert_eq!(tsv.lines().count() as u64, g["rows"].as_u64().unwrap());

    let rnn = summary(&gram(&["build-cooc", "--data", p(&data), "--config", p(&config), "--model", "rnn", "--out", p(&out)]));
    assert_eq!(rnn["dim"], 60);
}

#[test]
fn binary_task_trains_from_the_flags_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out = dir.path().join("bin");
    summary(&gram(&["train", "--data", p(&data), "--config", p(&config), "--task", "binary", "--model", "rnn", "--out", p(&out)]));
    let e = summary(&gram(&["evaluate", "--data", p(&data), "--checkpoint", p(&out.join("model.json")), "--out", p(&out)]));
    let auc = e["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn bad_input_exits_one() {
    let out = gram(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());

    assert_eq!(gram(&[]).status.code(), Some(1));
    assert_eq!(gram(&["train", "--data", "x", "--model", "lstm"]).status.code(), Some(1));
    assert_eq!(gram(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = gram(&["train", "--data", p(&dir.path().join("absent"))]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let (data, config) = fixture(dir.path());
    let wrong = gram(&["train", "--data", p(&data), "--config", p(&config), "--model", "rnn", "--init", "glove_augmented"]);
    assert_eq!(wrong.status.code(), Some(1));
    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "embeding_dim = 3\n").unwrap();
    assert_eq!(gram(&["train", "--data", p(&data), "--config", p(&typo)]).status.code(), Some(1));
}

#[test]
fn divergence_exits_two_and_keeps_the_last_good_model() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let config = dir.path().join("huge.toml");
    std::fs::write(&config, format!("{SMALL_TRAIN}l2 = 1.7976931348623157e308\n")).unwrap();
    let out = dir.path().join("div");
    let run = gram(&["train", "--data", p(&data), "--config", p(&config), "--out", p(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(out.join("last_good.json").exists());
    assert!(!out.join("model.json").exists());
}

#[test]
fn hpo_search_single_trial_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let space = dir.path().join("space.toml");
    std::fs::write(
        &space,
        "embedding_dim = [4, 6]\nhidden_dim = [4, 6]\nattention_dim = [3]\nl2 = [0.01, 0.001]\ndropout = [0.0, 0.2]\n",
    )
    .unwrap();
    let run = |out: &Path, trials: &str| {
        summary(&gram(&[
            "hpo-search", "--data", p(&data), "--config", p(&config), "--space", p(&space), "--trials", trials,
            "--seed", "4", "--out", p(out),
        ]))
    };
    let one = dir.path().join("one");
    let s = run(&one, "1");
    assert_eq!(s["trials"], 1);
    assert_eq!(s["best_trial"], 0);
    let csv = std::fs::read_to_string(one.join("hpo.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let best = std::fs::read_to_string(one.join("hpo_best.toml")).unwrap();
    assert!(best.contains(&format!("embedding_dim = {}", s["best"]["embedding_dim"])));

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = run(&a, "3");
    let sb = run(&b, "3");
    assert_eq!(sa["best"], sb["best"]);
    assert_eq!(std::fs::read(a.join("hpo.csv")).unwrap(), std::fs::read(b.join("hpo.csv")).unwrap());
    // the first sampled trial is the same whatever the trial count
    let first_of_three: Vec<String> = std::fs::read_to_string(a.join("hpo.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("0"))
        .map(|l| l.split(',').skip(2).take(5).collect::<Vec<_>>().join(","))
        .collect();
    let only: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').skip(2).take(5).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(first_of_three, only);

    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, "dropout = []\n").unwrap();
    let e = gram(&["hpo-search", "--data", p(&data), "--config", p(&config), "--space", p(&empty), "--out", p(&a)]);
    assert_eq!(e.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&e.stderr).contains("dropout"));
}
