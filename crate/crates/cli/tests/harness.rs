use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use evkf_cli::commands::{ledgers_in, read_ledger, trial_dir};
use evkf_cli::{
    cmd_bounds, cmd_compare, cmd_filter, cmd_simulate, Checkpoint, FilterChoice, HarnessError, Learner, RunConfig,
};
use evkf_core::filter::{EvkfConfig, LearningObjective};
use evkf_core::simulate::{System, Trajectory, TrajectoryMeta};
use evkf_core::Error;
use tempfile::TempDir;

fn lgssm(out: &Path, filter: FilterChoice) -> RunConfig {
    RunConfig {
        experiment: System::Lgssm,
        latent_dim: Some(3),
        obs_dim: None,
        trials: 1,
        t_train: 0,
        t_eval: 120,
        seed: 4,
        out_dir: out.to_path_buf(),
        filter,
        metrics: Default::default(),
        workers: None,
    }
}

fn evkf() -> FilterChoice {
    FilterChoice::Evkf { config: EvkfConfig::default(), learner: Learner::Truth }
}

fn vdp_learning(out: &Path, t_train: usize, t_eval: usize) -> RunConfig {
    let mut config = EvkfConfig { learn_every: Some(50), learn_epochs: 5, objective: LearningObjective::Kl, ..Default::default() };
    config.adam.step_size = 3e-2;
    let mut run = lgssm(out, FilterChoice::Evkf { config, learner: Learner::Network { gaussian_noise: 0.01 } });
    run.experiment = System::VdpPoisson;
    run.latent_dim = None;
    run.obs_dim = Some(10);
    run.t_train = t_train;
    run.t_eval = t_eval;
    run.metrics.attractor_rollout = 500;
    run.metrics.attractor_points = 50;
    run.metrics.chamfer_steps = 50;
    run.metrics.chamfer_seeds = 1;
    run
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timing");
    v
}

#[test]
fn config_roundtrips_and_hash_ignores_output_location() {
    let tmp = TempDir::new().unwrap();
    let config = vdp_learning(tmp.path(), 100, 20);
    let text = serde_json::to_string(&config).unwrap();
    let back = RunConfig::from_json(&text).unwrap();
    assert_eq!(back, config);
    let mut moved = config.clone();
    moved.out_dir = PathBuf::from("elsewhere");
    moved.workers = Some(3);
    assert_eq!(moved.hash(), config.hash());
    moved.seed += 1;
    assert_ne!(moved.hash(), config.hash());
    assert_eq!(config.hash().len(), 64);
}

#[test]
fn missing_and_invalid_fields_are_named() {
    let tmp = TempDir::new().unwrap();
    let mut value = serde_json::to_value(lgssm(tmp.path(), evkf())).unwrap();
    value.as_object_mut().unwrap().remove("trials");
    let err = RunConfig::from_json(&serde_json::to_string_pretty(&value).unwrap()).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    let msg = err.to_string();
    assert!(msg.contains("trials") && msg.contains("line"), "{msg}");
    assert_eq!(err.exit_code(), 2);

    let mut bad = lgssm(tmp.path(), evkf());
    bad.trials = 0;
    assert!(bad.validate().unwrap_err().to_string().contains("trials"));
    bad.trials = 1;
    bad.t_eval = 0;
    assert!(bad.validate().is_err());
    let unknown = serde_json::to_string(&lgssm(tmp.path(), evkf())).unwrap().replace("\"seed\"", "\"sead\"");
    assert!(RunConfig::from_json(&unknown).unwrap_err().to_string().contains("sead"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    assert_eq!(HarnessError::Core(Error::Numeric("x".into())).exit_code(), 3);
    assert_eq!(HarnessError::Core(Error::UpdateFailed { message: "x".into(), last_valid: vec![] }).exit_code(), 3);
    assert_eq!(HarnessError::Core(Error::InvalidParameter("x".into())).exit_code(), 2);
    assert_eq!(HarnessError::MixedHashes("a, b".into()).exit_code(), 2);
}

#[test]
fn simulate_writes_two_reproducible_files_per_trial() {
    let tmp = TempDir::new().unwrap();
    let config = lgssm(&tmp.path().join("a"), evkf());
    let files = cmd_simulate(&config).unwrap();
    assert_eq!(files.len(), 2);
    assert_eq!(files_under(&config.out_dir).len(), 2);
    let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    cmd_simulate(&config).unwrap();
    let again: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, again);

    let meta: TrajectoryMeta = serde_json::from_slice(&first[1]).unwrap();
    assert_eq!(meta.config_hash.as_deref(), Some(config.hash().as_str()));
    let tr = Trajectory::from_csv(std::str::from_utf8(&first[0]).unwrap(), meta).unwrap();
    assert_eq!(tr.len(), 120);

    let mut three = config.clone();
    three.trials = 3;
    three.out_dir = tmp.path().join("b");
    assert_eq!(cmd_simulate(&three).unwrap().len(), 6);
}

#[test]
fn kalman_and_evkf_ledgers_agree_on_linear_gaussian_data() {
    let tmp = TempDir::new().unwrap();
    let exact = cmd_filter(&lgssm(&tmp.path().join("kalman"), FilterChoice::Kalman)).unwrap();
    let variational = cmd_filter(&lgssm(&tmp.path().join("evkf"), evkf())).unwrap();
    for (a, b) in exact.iter().zip(&variational) {
        assert_eq!(a.metrics.keys().collect::<Vec<_>>(), b.metrics.keys().collect::<Vec<_>>());
        for (name, v) in &a.metrics {
            let (x, y) = (v.unwrap(), b.metrics[name].unwrap());
            assert!((x - y).abs() < 1e-8, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn filter_outputs_embed_the_hash_and_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let mut config = vdp_learning(&tmp.path().join("one"), 100, 20);
    config.trials = 2;
    let ledgers = cmd_filter(&config).unwrap();
    assert_eq!(ledgers.len(), 2);
    let hash = config.hash();
    let files = files_under(&config.out_dir);
    assert_eq!(files.len(), 6);
    for f in &files {
        assert!(fs::read_to_string(f).unwrap().contains(&hash), "{}", f.display());
    }
    let diagnostics = fs::read_to_string(trial_dir(&config.out_dir, 0).join("diagnostics.csv")).unwrap();
    assert_eq!(diagnostics.lines().count(), 2 + 120);
    for metric in ["rmse", "log_density", "dynamics_kl", "dynamics_kl_init", "log_chamfer"] {
        assert!(ledgers[0].metrics.contains_key(metric), "{metric}");
    }

    let mut serial = config.clone();
    serial.out_dir = tmp.path().join("two");
    serial.workers = Some(1);
    cmd_filter(&serial).unwrap();
    for trial in 0..2 {
        let a = trial_dir(&config.out_dir, trial).join("metrics.json");
        let b = trial_dir(&serial.out_dir, trial).join("metrics.json");
        assert_eq!(without_timing(&a), without_timing(&b));
        let ca = fs::read(trial_dir(&config.out_dir, trial).join("checkpoint.json")).unwrap();
        let cb = fs::read(trial_dir(&serial.out_dir, trial).join("checkpoint.json")).unwrap();
        assert_eq!(ca, cb);
    }
}

#[test]
fn evaluation_leaves_the_checkpoint_unchanged() {
    let tmp = TempDir::new().unwrap();
    let short = vdp_learning(&tmp.path().join("short"), 100, 10);
    let long = vdp_learning(&tmp.path().join("long"), 100, 60);
    cmd_filter(&short).unwrap();
    cmd_filter(&long).unwrap();
    let load = |c: &RunConfig| -> Checkpoint {
        serde_json::from_str(&fs::read_to_string(trial_dir(&c.out_dir, 0).join("checkpoint.json")).unwrap()).unwrap()
    };
    let (a, b) = (load(&short), load(&long));
    assert_eq!(a.dynamics, b.dynamics);
    assert_eq!(a.t_train, 100);

    let untrained = vdp_learning(&tmp.path().join("none"), 0, 110);
    cmd_filter(&untrained).unwrap();
    assert_ne!(load(&untrained).dynamics.params(), a.dynamics.params());
}

#[test]
fn compare_aggregates_ledgers() {
    let tmp = TempDir::new().unwrap();
    let mut config = lgssm(&tmp.path().join("run"), evkf());
    config.trials = 4;
    let ledgers = cmd_filter(&config).unwrap();
    let paths = ledgers_in(&config.out_dir).unwrap();
    assert_eq!(paths.len(), 4);

    let single = cmd_compare(&paths[..1], &tmp.path().join("single"), false).unwrap();
    assert_eq!(single.len(), 1);
    for (mean, std, n) in single[0].metrics.values() {
        assert_eq!(*std, 0.0);
        assert_eq!(*n, 1);
        assert!(mean.is_finite());
    }

    let twice = cmd_compare(&[paths[0].clone(), paths[0].clone()], &tmp.path().join("twice"), false).unwrap();
    for (name, (mean, _, _)) in &twice[0].metrics {
        assert_eq!(*mean, single[0].metrics[name].0);
    }

    let rows = cmd_compare(&paths, &tmp.path().join("all"), false).unwrap();
    let rmse: Vec<f64> = ledgers.iter().map(|l| l.metrics["rmse"].unwrap()).collect();
    let mean = rmse.iter().sum::<f64>() / 4.0;
    let std = (rmse.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let (m, s, n) = rows[0].metrics["rmse"];
    assert!((m - mean).abs() < 1e-12 && (s - std).abs() < 1e-12 && n == 4);
    let csv = fs::read_to_string(tmp.path().join("all/comparison.csv")).unwrap();
    assert!(csv.contains(&config.hash()));
    let md = fs::read_to_string(tmp.path().join("all/comparison.md")).unwrap();
    assert!(md.contains(&config.hash()) && md.contains(" ± "));
    assert_eq!(read_ledger(&paths[2]).unwrap(), ledgers[2]);
}

#[test]
fn compare_refuses_mixed_configs_unless_forced() {
    let tmp = TempDir::new().unwrap();
    let a = lgssm(&tmp.path().join("a"), evkf());
    let b = lgssm(&tmp.path().join("b"), FilterChoice::Kalman);
    cmd_filter(&a).unwrap();
    cmd_filter(&b).unwrap();
    let mut paths = ledgers_in(&a.out_dir).unwrap();
    paths.extend(ledgers_in(&b.out_dir).unwrap());
    let err = cmd_compare(&paths, tmp.path(), false).unwrap_err();
    assert!(matches!(err, HarnessError::MixedHashes(_)));
    let rows = cmd_compare(&paths, tmp.path(), true).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].filter.as_str(), rows[1].filter.as_str()), ("evkf", "kalman"));
    assert!(cmd_compare(&[], tmp.path(), true).is_err());
}

#[test]
fn bounds_report_one_row_per_step() {
    let tmp = TempDir::new().unwrap();
    let config = vdp_learning(tmp.path(), 100, 50);
    let summaries = cmd_bounds(&config).unwrap();
    assert_eq!(summaries[0].steps, 150);
    assert!(summaries[0].min_gap >= -1e-6);
    assert!(summaries[0].mean_gap >= summaries[0].min_gap);
    let csv = fs::read_to_string(trial_dir(tmp.path(), 0).join("bounds.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 150);
    for row in rows {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - v[2] - v[3]).abs() < 1e-9);
    }
    assert!(matches!(cmd_bounds(&lgssm(tmp.path(), FilterChoice::Kalman)), Err(HarnessError::Config(_))));
}

#[test]
fn linear_gaussian_bounds_are_positive() {
    let tmp = TempDir::new().unwrap();
    let summaries = cmd_bounds(&lgssm(tmp.path(), evkf())).unwrap();
    assert_eq!(summaries[0].steps, 120);
    assert!(summaries[0].min_gap > 0.0);
}

fn evkf_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_evkf")).args(args).output().unwrap()
}

#[test]
fn binary_reports_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let config_path = tmp.path().join("run.json");
    fs::write(&config_path, serde_json::to_string_pretty(&lgssm(&tmp.path().join("out"), evkf())).unwrap()).unwrap();
    let cfg = config_path.to_str().unwrap();

    let out = evkf_bin(&["simulate", "--config", cfg, "--trials", "2", "--seed", "9"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(files_under(&tmp.path().join("out")).len(), 4);

    let alt = tmp.path().join("alt");
    let out = evkf_bin(&["filter", "--config", cfg, "--out", alt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(trial_dir(&alt, 0).join("metrics.json").is_file());

    let out = evkf_bin(&["compare", "--config", cfg, "--out", alt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| lgssm | evkf | 1 |"));

    let out = evkf_bin(&["bounds", "--config", cfg, "--out", alt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{ \"experiment\": \"lgssm\" }").unwrap();
    let out = evkf_bin(&["filter", "--config", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing field"));

    let mut mismatched = lgssm(&tmp.path().join("bad"), FilterChoice::Kalman);
    mismatched.experiment = System::VdpPoisson;
    mismatched.latent_dim = None;
    fs::write(&broken, serde_json::to_string(&mismatched).unwrap()).unwrap();
    let out = evkf_bin(&["filter", "--config", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = evkf_bin(&["filter"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        RunConfig::load(&path, &Default::default()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 5);
}
