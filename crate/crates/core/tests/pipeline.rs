use crowd_agency::datasets::{generate_dataset, load_manifest, save_manifest, DatasetSpec, Split};
use crowd_agency::evalkit::{emit_curves, evaluate, evaluate_samples, read_curves, run_toy, write_toy_outputs, ToyConfig, ToyScheme};
use crowd_agency::trainer::{labeled_only_baseline, read_epoch_logs, run_training, Checkpoint, LrSchedule, RunConfig};

fn small_config(n_train: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DatasetSpec {
        n_train,
        n_test: 4,
        labeled_ratio: 0.2,
        size: (64, 64),
        count_range: (4, 40),
        seed: 3,
        ..DatasetSpec::default()
    };
    cfg.model.channels = 16;
    cfg.model.head_hidden = 8;
    cfg.train.epochs = epochs;
    cfg.train.num_agents = 6;
    cfg.train.model_lr = 1e-3;
    cfg.train.lr_schedule = LrSchedule::Cosine;
    cfg.train.augmentation.crop_size = 48;
    cfg
}

#[test]
fn training_lowers_train_error() {
    let cfg = small_config(50, 10);
    let dataset = generate_dataset(&cfg.data).unwrap();
    let run = run_training(&dataset, &cfg, None).unwrap();
    assert_eq!(run.logs.len(), 10);
    let mae: Vec<f64> = run.logs.iter().map(|l| l.train_mae.unwrap()).collect();
    assert!(mae[9] < mae[0], "{mae:?}");
}

#[test]
fn manifest_checkpoint_and_evaluation_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(8, 1);
    save_manifest(&generate_dataset(&cfg.data).unwrap(), &dir.path().join("data")).unwrap();
    let dataset = load_manifest(&dir.path().join("data")).unwrap();
    let run_dir = dir.path().join("run");
    let run = run_training(&dataset, &cfg, Some(&run_dir)).unwrap();

    assert_eq!(RunConfig::load(&run_dir.join("config.toml")).unwrap(), cfg);
    assert_eq!(read_epoch_logs(&run_dir.join("epochs.csv")).unwrap(), run.logs);
    let from_disk = evaluate(&run_dir, &dataset, Split::Test).unwrap();
    let in_memory = evaluate_samples(&run.checkpoint.model, &dataset.split(Split::Test)).unwrap();
    assert_eq!(from_disk, in_memory);
    assert!(from_disk.mae <= from_disk.mse);
    assert_eq!(Checkpoint::load(&run_dir).unwrap().partition, run.checkpoint.partition);
}

#[test]
fn curves_cover_both_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(8, 2);
    let dataset = generate_dataset(&cfg.data).unwrap();
    let semi = run_training(&dataset, &cfg, None).unwrap();
    let base = labeled_only_baseline(&dataset, &cfg, None).unwrap();
    assert_eq!(semi.steps, base.steps);
    assert_eq!(base.unlabeled_seen, 0);
    let points = emit_curves(&[("semi".into(), semi.logs), ("labeled_only".into(), base.logs)], dir.path()).unwrap();
    assert_eq!(points.len(), 4);
    assert_eq!(read_curves(&dir.path().join("curves.csv")).unwrap(), points);
    assert!(dir.path().join("curves.png").is_file());
}

#[test]
fn toy_outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_toy(&ToyConfig { scheme: ToyScheme::DFull, steps: 20, snapshot_every: 10, ..ToyConfig::default() }).unwrap();
    write_toy_outputs(&result, dir.path()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("toy_metrics.json")).unwrap()).unwrap();
    assert!(summary["metrics"]["inter_margin"].is_number());
    for step in [0, 10, 20] {
        assert!(dir.path().join(format!("toy_frames/step-{step:05}.json")).is_file());
    }
}
