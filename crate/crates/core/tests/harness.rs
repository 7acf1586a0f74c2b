use std::path::PathBuf;

use fleetgp::coreg::FleetDataset;
use fleetgp::envs::{sample_batch, to_member_samples, EnvironmentSpec};
use fleetgp::harness::{
    build_transition_model, read_results_csv, read_runs, run_experiment, run_single, summarize_dir, write_outputs,
    ExperimentConfig, FleetDiagnostic, ModelOptions, ResultRow, TargetType, RESULTS_CSV,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn smoke() -> ExperimentConfig {
    ExperimentConfig::from_file(&config_path("smoke.toml")).unwrap()
}

#[test]
fn shipped_configs_parse_with_documented_constants() {
    let mc = ExperimentConfig::from_file(&config_path("mountain_car.toml")).unwrap();
    assert_eq!(mc.fleet.params, vec![1.5e-3, 1e-3, 1e-4]);
    assert_eq!(mc.fleet.samples, vec![20, 100, 100]);
    assert_eq!(mc.gprl.supports, 200);
    assert_eq!(mc.gprl.gamma, 0.99);
    assert_eq!(mc.runs, 50);
    let env = mc.environment_spec().unwrap();
    assert_eq!((env.reward_width, env.horizon), (0.05, 200));

    let cp = ExperimentConfig::from_file(&config_path("cart_pole.toml")).unwrap();
    assert_eq!(cp.fleet.params, vec![0.1, 0.2, 0.5]);
    assert_eq!(cp.fleet.samples.iter().sum::<usize>(), 105);
    assert_eq!(cp.gprl.supports, 300);
    let env = cp.environment_spec().unwrap();
    assert_eq!(env.reward_width, 0.2);
    assert_eq!(env.start, vec![0.0; 4]);
    assert_eq!(env.goal, vec![0.0; 4]);

    let wf = ExperimentConfig::from_file(&config_path("wind_farm.toml")).unwrap();
    assert_eq!(wf.fleet.params, vec![1.0, 0.9, 0.9, 0.9, 0.8, 0.8, 0.8, 0.8]);
    assert_eq!(wf.fleet.samples.iter().sum::<usize>(), 400);
    assert_eq!(wf.gprl.supports, 300);
    let env = wf.environment_spec().unwrap();
    assert_eq!(env.goal[2], 1.07);
    assert_eq!(env.reward_width, 0.05);

    for name in ["smoke.toml", "sensitivity_source_a.toml"] {
        ExperimentConfig::from_file(&config_path(name)).unwrap();
    }
}

#[test]
fn smoke_run_writes_every_artifact() {
    let cfg = smoke();
    let results = run_experiment(&cfg).unwrap();
    assert_eq!(results.len(), 3);
    for r in &results {
        assert!(r.succeeded(), "{r:?}");
        assert!(r.metric.unwrap().is_finite());
        assert!(r.max_residual.unwrap() < 1e-8);
    }
    let fleet = results.iter().find(|r| r.target_type == TargetType::Fleet).unwrap();
    assert_eq!(fleet.correlations.len(), 2);
    for c in &fleet.correlations {
        for (i, row) in c.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.abs() <= 1.0));
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let summary = write_outputs(dir.path(), &cfg, &results).unwrap();
    for f in ["results.csv", "runs.json", "summary.json", "corr_0.json", "corr_1.json", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let rows = read_results_csv(&dir.path().join(RESULTS_CSV)).unwrap();
    assert_eq!(rows, results.iter().map(ResultRow::from).collect::<Vec<_>>());
    assert_eq!(read_runs(dir.path()).unwrap(), results);
    assert_eq!(summarize_dir(dir.path()).unwrap(), summary);
    let s = summary.get(TargetType::Single).unwrap();
    assert_eq!(s.median, results[0].metric);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let cfg = smoke();
    let a = run_single(&cfg, TargetType::Fleet, 0);
    let b = run_single(&cfg, TargetType::Fleet, 0);
    assert_eq!(a.without_timing(), b.without_timing());
    let json = |r: &fleetgp::harness::RunResult| serde_json::to_string(&r.without_timing()).unwrap();
    assert_eq!(json(&a), json(&b));
}

#[test]
fn failed_runs_are_recorded_not_propagated() {
    let mut cfg = smoke();
    // bypasses validation: the target ends up without samples inside the run
    cfg.fleet.samples[0] = 0;
    let r = run_single(&cfg, TargetType::Single, 0);
    assert!(!r.succeeded());
    assert_eq!(r.metric, None);
    assert_eq!(r.error.as_ref().unwrap().kind, "invalid_argument");
    // whole experiments refuse such a config up front
    assert!(run_experiment(&cfg).is_err());
}

fn mountain_car_fleet(powers: Vec<f64>, samples: &[usize], seed: u64) -> FleetDataset {
    let env = EnvironmentSpec::mountain_car(powers);
    let members = samples
        .iter()
        .enumerate()
        .map(|(m, &n)| to_member_samples(&env, &sample_batch(&env, m, n, seed + m as u64).unwrap()))
        .collect();
    FleetDataset::new(members, 1e-8).unwrap()
}

fn max_gap(a: &fleetgp::harness::BuiltModel, b: &fleetgp::harness::BuiltModel, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = DMatrix::from_fn(100, 3, |_, _| rng.random_range(-1.0..1.0));
    let mut gap = 0.0f64;
    for i in 0..100 {
        let x: Vec<f64> = q.row(i).iter().copied().collect();
        let (p, r) = (a.model.predict_input(&x), b.model.predict_input(&x));
        for d in 0..2 {
            gap = gap.max((p.mean[d] - r.mean[d]).abs()).max((p.variance[d] - r.variance[d]).abs());
        }
    }
    gap
}

#[test]
fn zero_cross_weights_reproduce_the_single_model() {
    for seed in [3, 4] {
        let data = mountain_car_fleet(vec![1.5e-3, 1e-3, 1e-4], &[15, 60, 60], seed);
        let opts = |d| ModelOptions {
            restarts: 2,
            seed,
            diagnostic: d,
            ..Default::default()
        };
        let single = build_transition_model(&data, TargetType::Single, 0, &opts(None)).unwrap();
        let fleet =
            build_transition_model(&data, TargetType::Fleet, 0, &opts(Some(FleetDiagnostic::ZeroCrossWeights))).unwrap();
        assert!(max_gap(&single, &fleet, seed) < 1e-10);
    }
}

#[test]
fn unit_weights_reproduce_the_joint_model() {
    for seed in [5, 6] {
        let data = mountain_car_fleet(vec![1.5e-3, 1.5e-3], &[15, 60], seed);
        let opts = |d| ModelOptions {
            restarts: 2,
            seed,
            diagnostic: d,
            ..Default::default()
        };
        let joint = build_transition_model(&data, TargetType::Joint, 0, &opts(None)).unwrap();
        let fleet = build_transition_model(&data, TargetType::Fleet, 0, &opts(Some(FleetDiagnostic::UnitWeights))).unwrap();
        assert!(max_gap(&joint, &fleet, seed) < 1e-8);
    }
}

#[test]
fn empty_target_is_rejected() {
    let env = EnvironmentSpec::mountain_car(vec![1.5e-3, 1e-3]);
    let members = vec![
        to_member_samples(&env, &[]),
        to_member_samples(&env, &sample_batch(&env, 1, 10, 0).unwrap()),
    ];
    let data = FleetDataset::new(members, 1e-8).unwrap();
    for t in TargetType::ALL {
        assert!(build_transition_model(&data, t, 0, &ModelOptions::default()).is_err());
    }
}

#[test]
fn increment_models_predict_next_states() {
    let data = mountain_car_fleet(vec![1.5e-3, 1e-3, 1e-4], &[15, 40, 40], 9);
    let opts = ModelOptions {
        restarts: 1,
        seed: 9,
        increments: true,
        ..Default::default()
    };
    for t in TargetType::ALL {
        let built = build_transition_model(&data, t, 0, &opts).unwrap();
        assert!(built.model.increments());
        let target = &data.members[0];
        for i in 0..target.len() {
            let x: Vec<f64> = target.inputs.row(i).iter().copied().collect();
            let p = built.model.predict_input(&x);
            for d in 0..2 {
                assert!((p.mean[d] - target.targets[(i, d)]).abs() < 1e-3, "{t:?} sample {i} dim {d}");
            }
        }
    }
}
