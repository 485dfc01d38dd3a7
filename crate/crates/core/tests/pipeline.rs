use std::path::Path;

use panolayout::experiments::commands::{save_checkpoint, train_to_dir, CHECKPOINT_DIR, HISTORY};
use panolayout::experiments::dataset::IMAGES;
use panolayout::experiments::{cmd_generate, cmd_train, generate_dataset, load_dataset, make_splits, train_in_memory, ExperimentConfig};
use panolayout::model::Model;
use panolayout::trainer::{train_iteration, AblationMode, TrainState};
use panolayout::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        seed: 4,
        data_seed: 9,
        n_samples: 30,
        n_val: 4,
        n_test: 4,
        label_budget: 6,
        total_iters: 24,
        eval_interval: 8,
        ..ExperimentConfig::default()
    }
}

fn history_lines(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(HISTORY)).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let written = cmd_generate(&cfg, dir.path(), false).unwrap();
    let read = load_dataset(dir.path()).unwrap();
    assert_eq!(read.manifest, written.manifest);
    assert_eq!(read.samples, written.samples);
    assert_eq!(generate_dataset(&cfg).unwrap().manifest.content_hash, written.manifest.content_hash);
    // a second generate into the same place needs --force
    assert!(matches!(cmd_generate(&cfg, dir.path(), false), Err(Error::Invalid(_))));
    cmd_generate(&cfg, dir.path(), true).unwrap();
}

#[test]
fn truncated_images_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_generate(&cfg, dir.path(), false).unwrap();
    let path = dir.path().join(IMAGES);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Sample { sample, .. }) => assert_eq!(sample, cfg.n_samples - 1),
        other => panic!("expected a per-sample error, got {other:?}"),
    }
}

#[test]
fn history_has_one_line_per_validation_pass() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let mut cfg = tiny();
    cmd_generate(&cfg, &data, false).unwrap();
    cfg.dataset_dir = Some(data);
    for (total, every) in [(24, 8), (20, 8)] {
        cfg.total_iters = total;
        cfg.eval_interval = every;
        let out = root.path().join(format!("run_{total}"));
        cmd_train(&cfg, &out, false, false).unwrap();
        let lines = history_lines(&out);
        assert_eq!(lines.len(), total / every + 1, "total {total} every {every}");
        for line in &lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["config_hash"].as_str().unwrap(), cfg.hash());
        }
    }
}

#[test]
fn resume_after_interruption_is_bit_exact() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = generate_dataset(&cfg).unwrap();
    let full = root.path().join("full");
    let straight = train_to_dir(&cfg, &ds, &full, false, false).unwrap();

    // crash right after the checkpoint at iteration 8
    let crashed = root.path().join("crashed");
    let ckpt = crashed.join(CHECKPOINT_DIR);
    let err = train_in_memory(&cfg, &ds, None, |rec, st| {
        save_checkpoint(&ckpt, &cfg, st)?;
        if rec.iteration == 8 {
            return Err(Error::Numerical("simulated crash".into()));
        }
        Ok(())
    });
    assert!(err.is_err());
    // the full history is copied on purpose: resume must drop lines past the checkpoint
    std::fs::copy(full.join(HISTORY), crashed.join(HISTORY)).unwrap();
    let resumed = train_to_dir(&cfg, &ds, &crashed, true, false).unwrap();

    assert_eq!(history_lines(&crashed), history_lines(&full));
    assert_eq!(resumed.state.student, straight.state.student);
    assert_eq!(resumed.state.teacher, straight.state.teacher);
    assert_eq!(resumed.best_test, straight.best_test);
}

#[test]
fn resume_rejects_a_changed_config() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ds = generate_dataset(&cfg).unwrap();
    let out = root.path().join("run");
    train_to_dir(&cfg, &ds, &out, false, false).unwrap();
    let other = ExperimentConfig { lr: 5e-4, ..cfg.clone() };
    assert!(train_to_dir(&other, &ds, &out, true, false).is_err());
    assert!(matches!(train_to_dir(&cfg, &ds, &out, false, false), Err(Error::Invalid(_))));
    let empty = root.path().join("empty");
    assert!(matches!(train_to_dir(&cfg, &ds, &empty, true, false), Err(Error::Invalid(_))));
}

#[test]
fn zero_consistency_weight_equals_supervised_training() {
    let cfg = tiny();
    let ds = generate_dataset(&cfg).unwrap();
    let off = ExperimentConfig {
        consistency_scale: 0.0,
        ..cfg.clone()
    };
    let sup = ExperimentConfig {
        supervised_only: true,
        ..cfg.clone()
    };
    let a = train_in_memory(&off, &ds, None, |_, _| Ok(())).unwrap();
    let b = train_in_memory(&sup, &ds, None, |_, _| Ok(())).unwrap();
    assert_eq!(a.state.student, b.state.student);
    assert_eq!(a.state.teacher, b.state.teacher);
    // and the consistency term does change training when it is on
    let on = train_in_memory(&cfg, &ds, None, |_, _| Ok(())).unwrap();
    assert_ne!(on.state.student, b.state.student);
}

#[test]
fn teacher_never_receives_gradients_and_freezes_at_alpha_one() {
    let cfg = ExperimentConfig {
        ema_decay: 1.0,
        ..tiny()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let ids = make_splits(&ds.manifest, &cfg).unwrap();
    let (splits, _) = panolayout::experiments::commands::split_views(&ds, &ids);
    let model = Model::new(cfg.height, cfg.width).unwrap();
    let mut tcfg = cfg.trainer_config().unwrap();
    for mode in AblationMode::ALL {
        tcfg.ablation_mode = mode;
        let mut state = TrainState::new(&model, cfg.seed);
        let initial = state.teacher.clone();
        for _ in 0..5 {
            let stats = train_iteration(&model, &mut state, &splits, &tcfg).unwrap();
            assert!(!stats.skipped);
            assert!(state.teacher.grads_all_zero(), "{mode:?}");
        }
        assert_eq!(state.teacher, initial, "{mode:?}");
        assert_ne!(state.student, initial, "{mode:?}");
    }
}
