mod common;

use std::fs;

use common::smoke;
use semanticfl::experiments::{
    read_metrics, read_sweep_summary, reproduce_ablation, run_experiment, run_experiment_with, run_sweep,
    ExperimentConfig, RunControl, SweepAxis, ABLATION_MD, CHECKPOINT_DIR, CONFIG_TOML, METRICS_COLUMNS, METRICS_CSV,
    MODEL_DIR, PARTITION_JSON, SUMMARY_JSON, SWEEP_CSV,
};
use semanticfl::fl::Algorithm;
use semanticfl::nn::load_checkpoint;
use semanticfl::Error;

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let r = run_experiment(&cfg).unwrap();
    for f in [METRICS_CSV, SUMMARY_JSON, CONFIG_TOML, PARTITION_JSON, "timing.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("features").join("manifest.json").is_file());
    let metrics = read_metrics(&dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(metrics.len(), cfg.rounds);
    assert_eq!(metrics, r.state.history.iter().map(|m| semanticfl::fl::MetricsRecord { wall_time_s: 0.0, ..m.clone() }).collect::<Vec<_>>());
    let header = fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    assert!(metrics.iter().all(|m| (0.0..=1.0).contains(&m.test_acc) && m.mean_ce.is_finite()));
    let (_, params) = load_checkpoint(&dir.path().join(MODEL_DIR)).unwrap();
    assert_eq!(params, r.state.params);
    assert_eq!(ExperimentConfig::load(&dir.path().join(CONFIG_TOML)).unwrap(), cfg);
    assert_eq!(r.summary.final_acc, metrics.last().unwrap().test_acc);
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&smoke(a.path())).unwrap();
    run_experiment(&smoke(b.path())).unwrap();
    assert_eq!(
        fs::read(a.path().join(METRICS_CSV)).unwrap(),
        fs::read(b.path().join(METRICS_CSV)).unwrap()
    );
    assert_eq!(
        load_checkpoint(&a.path().join(MODEL_DIR)).unwrap().1,
        load_checkpoint(&b.path().join(MODEL_DIR)).unwrap().1
    );

    let c = tempfile::tempdir().unwrap();
    let other = smoke(c.path()).with_seed(1);
    run_experiment(&other).unwrap();
    assert_ne!(
        fs::read(a.path().join(PARTITION_JSON)).unwrap(),
        fs::read(c.path().join(PARTITION_JSON)).unwrap()
    );
}

#[test]
fn zero_semantic_weights_reproduce_fedavg() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut sem = smoke(a.path());
    sem.round.algorithm = Algorithm::Semanticfl;
    sem.round.weights.lambda_kd = 0.0;
    sem.round.weights.lambda_con = 0.0;
    let mut avg = smoke(b.path());
    avg.round.algorithm = Algorithm::Fedavg;
    let ra = run_experiment(&sem).unwrap();
    let rb = run_experiment(&avg).unwrap();
    assert_eq!(
        fs::read(a.path().join(METRICS_CSV)).unwrap(),
        fs::read(b.path().join(METRICS_CSV)).unwrap()
    );
    assert_eq!(ra.state.params, rb.state.params);
}

#[test]
fn interrupted_run_resumes_exactly() {
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    let mut cfg = smoke(full.path());
    cfg.rounds = 3;
    let reference = run_experiment(&cfg).unwrap();

    let mut cut = cfg.clone();
    cut.output_dir = part.path().to_path_buf();
    let first = run_experiment_with(&cut, RunControl { stop_after: Some(1) }).unwrap();
    assert_eq!(first.state.round, 1);
    assert!(part.path().join(CHECKPOINT_DIR).join("state.json").is_file());
    let resumed = run_experiment(&cut).unwrap();
    assert_eq!(resumed.state.round, 3);
    assert_eq!(resumed.state.params, reference.state.params);
    assert_eq!(
        fs::read(part.path().join(METRICS_CSV)).unwrap(),
        fs::read(full.path().join(METRICS_CSV)).unwrap()
    );

    // A checkpoint from a different configuration is refused.
    let mut changed = cut.clone();
    changed.round.lr *= 2.0;
    changed.rounds = 4;
    assert!(matches!(run_experiment(&changed), Err(Error::State(_))));
}

#[test]
fn sweep_isolates_failing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = smoke(&dir.path().join("unused"));
    base.rounds = 1;
    let points = run_sweep(&base, SweepAxis::Epochs, &[1.0, 0.5], &[0, 1], dir.path()).unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!((points[0].runs, points[0].failed), (2, 0));
    assert_eq!((points[1].runs, points[1].failed), (0, 2));
    assert!(points[1].mean_acc.is_nan());
    let cells = fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
    assert_eq!(cells.lines().filter(|l| l.contains("failed")).count(), 2);
    let (axis, back) = read_sweep_summary(&dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(axis, SweepAxis::Epochs);
    assert_eq!(back[0].runs, 2);
    assert!(run_sweep(&base, SweepAxis::Epochs, &[], &[0], dir.path()).unwrap_err().is_config());
}

#[test]
fn ablation_grid_has_four_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = smoke(&dir.path().join("unused"));
    base.rounds = 1;
    let cells = reproduce_ablation(&base, &[0], dir.path()).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(!cells[0].semantic_losses && !cells[0].feature_guidance);
    assert!(cells.iter().all(|c| c.accs.len() == 1 && c.std_acc == 0.0));
    let table = fs::read_to_string(dir.path().join(ABLATION_MD)).unwrap();
    assert_eq!(table.lines().count(), 6);

    // The all-off cell equals a FedAvg run under the same seed.
    let mut avg = base.clone().with_seed(0);
    avg.round.algorithm = Algorithm::Fedavg;
    avg.output_dir = dir.path().join("fedavg");
    let r = run_experiment(&avg).unwrap();
    assert_eq!(cells[0].accs[0], r.summary.final_acc);
}

#[test]
fn invalid_configs_fail_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.round.clients_per_round = 9;
    cfg.round.weights.tau = -1.0;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_config());
    let msg = err.to_string();
    assert!(msg.contains("clients_per_round") && msg.contains("tau"), "{msg}");
    assert!(!dir.path().join(METRICS_CSV).exists());

    let mut diffusion = smoke(dir.path());
    diffusion.provider = semanticfl::features::ProviderKind::Diffusion;
    diffusion.store_dir = Some(dir.path().join("nowhere"));
    assert!(matches!(run_experiment(&diffusion), Err(Error::MissingStore { .. })));
}

#[test]
fn config_files_round_trip_and_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let path = dir.path().join("c.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    let text = cfg.to_toml().replacen("[round]", "[round]\nlearning_rate = 0.1", 1);
    assert!(ExperimentConfig::from_toml(&text).unwrap_err().is_config());
    assert!(ExperimentConfig::load(&dir.path().join("missing.toml")).is_err());
}
