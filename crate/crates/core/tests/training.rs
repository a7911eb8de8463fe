use std::io::Write;

use sker::exec::Executor;
use sker::sker_model::{AblationConfig, SkerModel};
use sker::synonym_graph::GraphSet;
use sker::synthetic::{overfit_corpus, synonym_task, SynonymTask, SynonymTaskShape};
use sker::trainer::{
    adam_step, build_model, effective_graphs, evaluate, run_ablation_suite, train, AdamHyper, AdamState, Checkpoint,
    LogEntry, TrainConfig,
};
use sker::Error;

fn small_task(seed: u64) -> SynonymTask {
    synonym_task(
        SynonymTaskShape {
            train_instances: 96,
            dev_instances: 32,
            test_instances: 48,
            ..SynonymTaskShape::default()
        },
        seed,
    )
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d: 16,
        embedding_dim: 16,
        max_epochs: 4,
        patience_epochs: 2,
        ..TrainConfig::default()
    }
}

fn model_for(config: &TrainConfig, task: &SynonymTask) -> SkerModel {
    build_model(config, &task.train, &[&task.dev, &task.test], &task.graphs, None).unwrap()
}

const HYPER: AdamHyper = AdamHyper {
    learning_rate: 0.1,
    beta1: 0.9,
    beta2: 0.999,
    epsilon: 1e-8,
};

#[test]
fn adam_first_step_matches_hand_computation() {
    // m = 0.1 g, v = 0.001 g²; bias correction restores g and g²
    let g = [0.5, -2.0, 1e-3];
    let mut p = [1.0, 1.0, 1.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    HYPER.update(1, &mut p, &g, &mut m, &mut v);
    for i in 0..3 {
        let expected = 1.0 - 0.1 * g[i] / (g[i].abs() + 1e-8);
        assert!((p[i] - expected).abs() < 1e-12, "{} vs {expected}", p[i]);
        assert!((m[i] - 0.1 * g[i]).abs() < 1e-15);
        assert!((v[i] - 0.001 * g[i] * g[i]).abs() < 1e-15);
    }
}

#[test]
fn adam_minimizes_a_quadratic_like_a_reference_loop() {
    let mut x = [3.0];
    let (mut m, mut v) = ([0.0], [0.0]);
    // reference written out independently
    let (mut rx, mut rm, mut rv) = (3.0f64, 0.0f64, 0.0f64);
    for t in 1..=400u64 {
        let grad = [2.0 * x[0]];
        HYPER.update(t, &mut x, &grad, &mut m, &mut v);
        let g = 2.0 * rx;
        rm = 0.9 * rm + (1.0 - 0.9) * g;
        rv = 0.999 * rv + (1.0 - 0.999) * g * g;
        let mh = rm / (1.0 - 0.9f64.powi(t as i32));
        let vh = rv / (1.0 - 0.999f64.powi(t as i32));
        rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    assert_eq!(x[0].to_bits(), rx.to_bits());
    assert!(x[0].abs() < 0.05, "x = {}", x[0]);
}

#[test]
fn non_finite_gradient_aborts_before_updating() {
    let task = small_task(1);
    let config = small_config();
    let mut model = model_for(&config, &task);
    let before = model.clone();
    let mut grads = model.zero_grads();
    grads.head.w_gate.data[3] = f64::NAN;
    let mut state = AdamState::new(&model);
    let err = adam_step(&mut model, &grads, &mut state, AdamHyper::from(&config)).unwrap_err();
    assert!(matches!(&err, Error::NonFiniteGradient(name) if name.contains("w_gate")), "{err}");
    assert_eq!(model, before);
    assert_eq!(state.step, 0);
}

#[test]
fn nan_parameters_surface_as_divergence() {
    let task = small_task(2);
    let config = small_config();
    let mut model = model_for(&config, &task);
    model.head_mut().u_score.data[0] = f64::NAN;
    let err = train(&config, model, &task.train, &task.dev, &task.graphs, None).err().unwrap();
    assert!(matches!(err, Error::Divergence { epoch: 1, batch: 1 }), "{err}");
}

#[test]
fn early_stopping_keeps_the_best_dev_epoch() {
    let task = small_task(3);
    let config = TrainConfig {
        max_epochs: 8,
        patience_epochs: 1,
        ..small_config()
    };
    let mut log = Vec::new();
    let out = train(&config, model_for(&config, &task), &task.train, &task.dev, &task.graphs, Some(&mut log)).unwrap();
    let best = out.dev_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.dev_accuracy, best);
    assert_eq!(out.dev_history[out.checkpoint.best_epoch - 1], best);
    let exec = Executor::sequential();
    let dev = evaluate(&out.checkpoint.model, &task.dev, &task.graphs, config.neighbor_cap, config.seed, &exec).unwrap();
    assert_eq!(dev.accuracy, best);
    // stopping happened exactly one epoch after the last strict improvement
    if out.epochs_run < config.max_epochs {
        assert!(out.dev_history[out.epochs_run - 1] <= best);
        assert_eq!(out.epochs_run, out.checkpoint.best_epoch + config.patience_epochs);
    }

    let entries: Vec<LogEntry> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries, out.log);
    let batches_per_epoch = task.train.len().div_ceil(config.batch_size);
    assert_eq!(entries.len(), out.epochs_run * batches_per_epoch);
    for e in &entries {
        assert!(e.loss.is_finite() && e.loss > 0.0);
        assert_eq!(e.dev_accuracy.is_some(), e.batch == batches_per_epoch);
    }
}

#[test]
fn training_reduces_loss_on_memorization_task() {
    let (split, _) = overfit_corpus(32, 4, 16, 4);
    let config = TrainConfig {
        max_epochs: 10,
        patience_epochs: 10,
        ..TrainConfig::default()
    };
    let graphs = GraphSet::new();
    let out = train(&config, build_model(&config, &split, &[], &graphs, None).unwrap(), &split, &split, &graphs, None).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
}

#[test]
fn multi_worker_training_is_reproducible() {
    let task = small_task(5);
    let config = TrainConfig {
        workers: 3,
        max_epochs: 2,
        ..small_config()
    };
    let a = train(&config, model_for(&config, &task), &task.train, &task.dev, &task.graphs, None).unwrap();
    let b = train(&config, model_for(&config, &task), &task.train, &task.dev, &task.graphs, None).unwrap();
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
    let seq = TrainConfig { workers: 1, ..config.clone() };
    let c = train(&seq, model_for(&seq, &task), &task.train, &task.dev, &task.graphs, None).unwrap();
    // different reduction order only perturbs rounding
    for (x, y) in a.log.iter().zip(&c.log) {
        assert!((x.loss - y.loss).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_loading_checks_integrity_and_compatibility() {
    let task = small_task(6);
    let config = TrainConfig { max_epochs: 1, ..small_config() };
    let out = train(&config, model_for(&config, &task), &task.train, &task.dev, &task.graphs, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.checkpoint.save(&path).unwrap();

    let loaded = Checkpoint::load_matching(&path, &config, &task.graphs).unwrap();
    assert_eq!(loaded.to_json().unwrap(), out.checkpoint.to_json().unwrap());

    let wide = TrainConfig { d: 32, ..config.clone() };
    let err = Checkpoint::load_matching(&path, &wide, &task.graphs).unwrap_err().to_string();
    assert!(err.contains("16") && err.contains("32"), "{err}");

    let other = small_task(7).graphs;
    let mut trimmed = GraphSet::new();
    for g in other.iter().skip(1) {
        trimmed.insert(g.clone()).unwrap();
    }
    let err = Checkpoint::load_matching(&path, &config, &trimmed).unwrap_err();
    assert!(err.to_string().contains("fingerprint"), "{err}");

    let text = std::fs::read_to_string(&path).unwrap();
    let truncated = dir.path().join("truncated.json");
    std::fs::File::create(&truncated).unwrap().write_all(&text.as_bytes()[..text.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::load(&truncated), Err(Error::Checkpoint(_))));

    let tampered = text.replacen("\"d\":16", "\"d\":8", 1);
    assert!(matches!(Checkpoint::from_json(&tampered), Err(Error::Checkpoint(_))));
}

#[test]
fn synonym_ablation_replaces_graphs_with_random_ones() {
    let task = small_task(8);
    let full = TrainConfig::default();
    let ablated = TrainConfig {
        ablation: AblationConfig::WITHOUT_SYNONYM,
        ..TrainConfig::default()
    };
    let centers: Vec<String> = task.test.vocabulary().into_iter().collect();
    let m = model_for(&full, &task);
    assert!(matches!(effective_graphs(&m, &task.graphs, &centers, 7, 1).unwrap(), std::borrow::Cow::Borrowed(_)));
    let m = model_for(&ablated, &task);
    let a = effective_graphs(&m, &task.graphs, &centers, 7, 1).unwrap().into_owned();
    let b = effective_graphs(&m, &task.graphs, &centers, 7, 2).unwrap().into_owned();
    assert_ne!(a, b);
    for c in &centers {
        assert_eq!(a.neighbors(c).len(), 7);
        assert!(!a.neighbors(c).contains(c));
    }
}

#[test]
fn config_files_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("c.toml");
    std::fs::write(&toml_path, "learning_rate = 0.002\nbatch_size = 8\n").unwrap();
    let c = TrainConfig::from_file(&toml_path).unwrap();
    assert_eq!((c.learning_rate, c.batch_size, c.d), (0.002, 8, 32));
    let json_path = dir.path().join("c.json");
    std::fs::write(&json_path, serde_json::to_string(&TrainConfig::published()).unwrap()).unwrap();
    assert_eq!(TrainConfig::from_file(&json_path).unwrap(), TrainConfig::published());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "heads = 5\n").unwrap();
    assert!(matches!(TrainConfig::from_file(&bad), Err(Error::Config(_))));
}

#[test]
fn published_hyperparameters() {
    // PAPER: Adam, lr 2e-5, batch 128, dropout 0.2, two heads, BERT-base width
    let p = TrainConfig::published();
    assert_eq!(
        (p.learning_rate, p.batch_size, p.dropout, p.heads, p.d),
        (2e-5, 128, 0.2, 2, 768)
    );
}

#[test]
fn ablation_suite_produces_four_rows() {
    let task = small_task(9);
    let config = TrainConfig { max_epochs: 2, ..small_config() };
    let table = run_ablation_suite(&config, &task.train, &task.dev, &[&task.dev, &task.test], &task.graphs, None).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["SKER", "w/o synonym", "w/o gate", "w/o gate & GAT"]);
    assert_eq!(table.rows[0].delta, 0.0);
    for row in &table.rows {
        // the average covers test only; dev is excluded
        assert_eq!(row.average, row.reports[1].accuracy);
        assert!((row.delta - (row.average - table.rows[0].average)).abs() < 1e-15);
    }
    let text = table.render();
    assert!(text.lines().count() == 5 && text.contains("Ave"));
}
