use gram::ehr::{split_dataset, DatasetSplit, Task};
use gram::model::batch_loss;
use gram::synth::{generate, SynthConfig, SynthDataset};
use gram::training::{initialize, model_dims, param_count, train, InitMode, ModelKind, TrainConfig, TrainedModel};
use gram::Error;

fn tiny(patients: usize, seed: u64) -> SynthDataset {
    generate(&SynthConfig {
        num_leaves: 40,
        branching: vec![4, 2],
        num_patients: patients,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        embedding_dim: 8,
        hidden_dim: 8,
        attention_dim: 6,
        l2: 0.0,
        dropout: 0.0,
        batch_size: 16,
        max_epochs: 5,
        patience: 5,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn split(data: &SynthDataset) -> DatasetSplit {
    split_dataset(&data.records, [0.6, 0.2, 0.2], 1).unwrap()
}

#[test]
fn patience_zero_single_epoch_runs_once() {
    let data = tiny(30, 1);
    let cfg = TrainConfig { max_epochs: 1, patience: 0, ..config() };
    let (model, report) = train(&cfg, &split(&data), &data.groups, None, &data.dag).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert!(report.best_epoch <= 1);
    assert_eq!(model.epoch, report.best_epoch);
}

#[test]
fn returned_model_is_the_best_validation_epoch() {
    let data = tiny(60, 2);
    let cfg = TrainConfig { max_epochs: 25, patience: 2, dropout: 0.3, ..config() };
    let split = split(&data);
    let (model, report) = train(&cfg, &split, &data.groups, None, &data.dag).unwrap();
    let min = report.epochs.iter().map(|e| e.valid_loss).fold(f64::INFINITY, f64::min);
    assert!(report.best_valid_loss <= min);
    assert!(report.best_epoch <= report.epochs.len());
    assert_eq!(model.epoch, report.best_epoch);
    if report.best_epoch > 0 {
        assert_eq!(report.epochs[report.best_epoch - 1].valid_loss, report.best_valid_loss);
    }
    // stops once patience is exhausted
    if report.epochs.len() < cfg.max_epochs {
        assert_eq!(report.epochs.len(), report.best_epoch + cfg.patience + 1);
    }
    let examples = model.inputs.examples(&split.validation, &data.groups, Task::Sequential, None).unwrap();
    let again = batch_loss(model.params(), &model.inputs.support, &examples);
    assert_eq!(again.to_bits(), report.best_valid_loss.to_bits());
}

#[test]
fn five_patients_are_fit_steadily() {
    let data = tiny(5, 4);
    let split = DatasetSplit {
        train: data.records.clone(),
        validation: data.records.clone(),
        test: Vec::new(),
    };
    let cfg = TrainConfig {
        embedding_dim: 16,
        hidden_dim: 16,
        attention_dim: 8,
        batch_size: 5,
        max_epochs: 200,
        patience: 200,
        ..config()
    };
    let (_, report) = train(&cfg, &split, &data.groups, None, &data.dag).unwrap();
    assert_eq!(report.epochs.len(), 200);
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
    for w in losses[10..].windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    assert!(last < 0.25 * first, "initial {first}, final {last}");
}

#[test]
fn dropout_free_runs_repeat_exactly() {
    let data = tiny(40, 5);
    let split = split(&data);
    let (a, ra) = train(&config(), &split, &data.groups, None, &data.dag).unwrap();
    let (b, rb) = train(&config(), &split, &data.groups, None, &data.dag).unwrap();
    let bits = |r: &gram::training::TrainReport| -> Vec<(u64, u64)> {
        r.epochs.iter().map(|e| (e.train_loss.to_bits(), e.valid_loss.to_bits())).collect()
    };
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

    let examples = a.inputs.examples(&split.train, &data.groups, Task::Sequential, None).unwrap();
    let x = batch_loss(a.params(), &a.inputs.support, &examples);
    let y = batch_loss(a.params(), &a.inputs.support, &examples);
    assert_eq!(x.to_bits(), y.to_bits());
}

#[test]
fn every_model_kind_and_task_trains() {
    let data = tiny(40, 6);
    let split = split(&data);
    let kinds = [
        (ModelKind::Gram, InitMode::Random),
        (ModelKind::Gram, InitMode::GloveAugmented),
        (ModelKind::RandomDag, InitMode::GloveAugmented),
        (ModelKind::Rnn, InitMode::GloveLeafOnly),
        (ModelKind::SimpleRollup, InitMode::Random),
        (ModelKind::RollupRare, InitMode::GloveLeafOnly),
    ];
    for (model, init) in kinds {
        for task in [Task::Sequential, Task::Binary] {
            let cfg = TrainConfig { model, init, task, max_epochs: 2, glove_epochs: 3, ..config() };
            let flags = (task == Task::Binary).then_some(&data.flags);
            let (trained, report) = train(&cfg, &split, &data.groups, flags, &data.dag).unwrap();
            assert_eq!(report.epochs.len(), 2, "{model:?} {task:?}");
            assert_eq!(report.glove_losses.is_empty(), init == InitMode::Random);
            let (inputs, _, _) = initialize(&cfg, &data.dag, &split.train, data.groups.num_groups()).unwrap();
            let dims = model_dims(&cfg, &inputs, data.groups.num_groups());
            assert_eq!(trained.params().count(), param_count(&dims));
            let restored = TrainedModel::from_json(&trained.to_json().unwrap()).unwrap();
            assert_eq!(restored, trained);
        }
    }
}

#[test]
fn binary_task_needs_flags() {
    let data = tiny(20, 7);
    let cfg = TrainConfig { task: Task::Binary, ..config() };
    let err = train(&cfg, &split(&data), &data.groups, None, &data.dag).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn overflowing_loss_reports_divergence_with_last_good_model() {
    let data = tiny(20, 8);
    let cfg = TrainConfig { l2: f64::MAX, ..config() };
    match train(&cfg, &split(&data), &data.groups, None, &data.dag) {
        Err(Error::Diverged { epoch, last_good }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.epoch, 0);
            assert!(last_good.params().first_non_finite().is_none());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn gram_matches_or_beats_rnn_validation_loss() {
    let data = generate(&SynthConfig::default()).unwrap();
    let base = TrainConfig {
        hidden_dim: 64,
        attention_dim: 32,
        l2: 0.001,
        dropout: 0.2,
        max_epochs: 10,
        patience: 3,
        ..TrainConfig::default()
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..3 {
        let split = split_dataset(&data.records, gram::ehr::DEFAULT_SPLIT, seed).unwrap();
        let gram_cfg = TrainConfig { embedding_dim: 32, model: ModelKind::Gram, seed, ..base.clone() };
        let rnn_cfg = TrainConfig { embedding_dim: 43, model: ModelKind::Rnn, seed, ..base.clone() };
        let (_, g) = train(&gram_cfg, &split, &data.groups, None, &data.dag).unwrap();
        let (_, r) = train(&rnn_cfg, &split, &data.groups, None, &data.dag).unwrap();
        detail.push((g.best_valid_loss, r.best_valid_loss));
        wins += usize::from(g.best_valid_loss <= r.best_valid_loss);
    }
    assert!(wins >= 2, "validation losses (gram, rnn): {detail:?}");
}
