use std::fs;

use simam_core::data::{generate_synthetic, load_dataset, make_batch, SynthSpec};
use simam_core::network::{build, ArchitectureConfig, Network};
use simam_core::nn::Module;
use simam_core::train::{
    evaluate, train, OptimizerConfig, TrainRunConfig, BEST_DIR, FINAL_DIR, LAST_FINITE_DIR, METRICS_FILE, METRICS_HEADER,
};
use simam_core::Error;

fn tiny_run() -> TrainRunConfig {
    TrainRunConfig {
        epochs: 2,
        batch_size: 8,
        seed: 4,
        image_size: 32,
        ..TrainRunConfig::default()
    }
}

#[test]
fn train_save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    generate_synthetic(
        &root,
        &SynthSpec {
            train_per_class: 2,
            test_per_class: 1,
            size: 32,
            seed: 2,
        },
    )
    .unwrap();
    let data = load_dataset(&root).unwrap();
    let cfg = ArchitectureConfig::preset("desk").unwrap();
    let mut net = build(&cfg, 1).unwrap();
    let out = tmp.path().join("run");
    let run = tiny_run();
    let report = train(&mut net, &data, &run, Some(&out)).unwrap();

    let csv = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv, report.metrics_csv());
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 3);

    let mut restored = Network::load_checkpoint(&out.join(FINAL_DIR)).unwrap();
    let (x, _) = make_batch(&data.test, &[0, 3, 7], 32, None, &data.norm).unwrap();
    assert_eq!(net.predict(&x).unwrap(), restored.predict(&x).unwrap());

    let mut best = Network::load_checkpoint(&out.join(BEST_DIR)).unwrap();
    let acc = evaluate(&mut best, &data.test, &data.norm, 32, 5).unwrap().accuracy;
    assert_eq!(acc, report.best_test_acc);
}

#[test]
fn lambda_override_reaches_every_insertion() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    generate_synthetic(
        &root,
        &SynthSpec {
            train_per_class: 1,
            test_per_class: 0,
            size: 32,
            seed: 3,
        },
    )
    .unwrap();
    let data = load_dataset(&root).unwrap();
    let mut net = build(&ArchitectureConfig::preset("desk").unwrap(), 0).unwrap();
    let run = TrainRunConfig {
        epochs: 1,
        lambda: Some(0.07),
        ..tiny_run()
    };
    train(&mut net, &data, &run, None).unwrap();
    assert_eq!(net.config().lambda, 0.07);
    assert_eq!(net.simam_blocks(), 2);
}

#[test]
fn divergence_rolls_back_to_finite_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    generate_synthetic(
        &root,
        &SynthSpec {
            train_per_class: 1,
            test_per_class: 1,
            size: 32,
            seed: 6,
        },
    )
    .unwrap();
    let data = load_dataset(&root).unwrap();
    let mut net = build(&ArchitectureConfig::preset("desk").unwrap(), 0).unwrap();
    let mut run = tiny_run();
    run.epochs = 5;
    run.optimizer = OptimizerConfig {
        lr0: 1e200,
        ..OptimizerConfig::sgd()
    };
    let out = tmp.path().join("run");
    let err = train(&mut net, &data, &run, Some(&out)).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(net.state().iter().all(|t| t.all_finite()));
    let saved = Network::load_checkpoint(&out.join(LAST_FINITE_DIR)).unwrap();
    assert!(saved.state().iter().all(|t| t.all_finite()));
}
