//! The four harness commands. Trials run on a rayon pool; each owns its RNG stream and files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use evkf_core::dynamics::DynamicsModel;
use evkf_core::metrics::mean_std;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FilterChoice, RunConfig};
use crate::error::{HarnessError, Result};
use crate::run::{run_trial, trajectory, trial_metrics};

/// Per-trial metrics file, the unit `cmd_compare` aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub config_hash: String,
    pub experiment: String,
    pub filter: String,
    pub trial: usize,
    pub seed: u64,
    pub t_train: usize,
    pub t_eval: usize,
    pub metrics: BTreeMap<String, Option<f64>>,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Mean wall-clock time of a filter step, excluding IO.
    pub wall_us_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub trial: usize,
    /// Steps of learning before the model was frozen.
    pub t_train: usize,
    pub dynamics: DynamicsModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsSummary {
    pub config_hash: String,
    pub trial: usize,
    pub steps: usize,
    pub min_gap: f64,
    pub mean_gap: f64,
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial:03}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    fs::write(path, contents).map_err(HarnessError::io(path))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(evkf_core::Error::from)?;
    text.push('\n');
    write(path, text)
}

fn for_each_trial<T: Send>(config: &RunConfig, job: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..config.trials).into_par_iter().map(&job).collect())
}

/// Writes `data/trial_NNN.csv` and `data/trial_NNN.meta.json` for every trial.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let hash = config.hash();
    let dir = config.out_dir.join("data");
    let files = for_each_trial(config, |trial| {
        let tr = trajectory(config, trial)?;
        let stem = format!("trial_{trial:03}");
        let csv = write(&dir.join(format!("{stem}.csv")), format!("# config_hash {hash}\n{}", tr.to_csv()))?;
        let meta = write_json(&dir.join(format!("{stem}.meta.json")), &tr.meta)?;
        Ok([csv, meta])
    })?;
    Ok(files.into_iter().flatten().collect())
}

/// Filters every trial, writing `diagnostics.csv`, `metrics.json` and `checkpoint.json` to
/// its directory. Datasets are regenerated from the config, which reproduces the files
/// `cmd_simulate` writes bit for bit.
pub fn cmd_filter(config: &RunConfig) -> Result<Vec<Ledger>> {
    let hash = config.hash();
    for_each_trial(config, |trial| {
        let data = trajectory(config, trial)?;
        let run = run_trial(config, &config.filter, &data, trial)?;
        let dir = trial_dir(&config.out_dir, trial);

        let mut csv = format!("# config_hash {hash}\nt");
        for i in 1..=run.estimates.ncols() {
            write!(csv, ",m{i}").unwrap();
        }
        if run.diagnostics.is_some() {
            csv.push_str(",elbo_L,elbo_M,gap,cvi_iters,learn_loss");
        }
        csv.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (t, row) in run.estimates.row_iter().enumerate() {
            write!(csv, "{}", t + 1).unwrap();
            for v in row.iter() {
                write!(csv, ",{v}").unwrap();
            }
            if let Some(d) = run.diagnostics.as_ref().map(|all| &all[t]) {
                write!(csv, ",{},{},{},{},{}", d.elbo_l, opt(d.elbo_m), opt(d.gap), d.cvi_iters, opt(d.learn_loss))
                    .unwrap();
            }
            csv.push('\n');
        }
        write(&dir.join("diagnostics.csv"), csv)?;

        let checkpoint = Checkpoint { config_hash: hash.clone(), trial, t_train: config.t_train, dynamics: run.dynamics.clone() };
        write_json(&dir.join("checkpoint.json"), &checkpoint)?;

        let ledger = Ledger {
            config_hash: hash.clone(),
            experiment: config.experiment.name().into(),
            filter: config.filter.name().into(),
            trial,
            seed: config.trial_seed(trial),
            t_train: config.t_train,
            t_eval: config.t_eval,
            metrics: trial_metrics(config, &data, &run, trial)?,
            timing: Timing { wall_us_per_step: run.wall_us_per_step },
        };
        write_json(&dir.join("metrics.json"), &ledger)?;
        Ok(ledger)
    })
}

/// Runs eVKF with the bound diagnostics switched on and writes `bounds.csv` (one row per step)
/// and `bounds.json` for every trial.
pub fn cmd_bounds(config: &RunConfig) -> Result<Vec<BoundsSummary>> {
    let FilterChoice::Evkf { config: evkf, learner } = &config.filter else {
        return Err(HarnessError::Config("bounds need an evkf filter".into()));
    };
    let filter = FilterChoice::Evkf { config: evkf_core::EvkfConfig { compute_bounds: true, ..evkf.clone() }, learner: learner.clone() };
    let hash = config.hash();
    for_each_trial(config, |trial| {
        let data = trajectory(config, trial)?;
        let run = run_trial(config, &filter, &data, trial)?;
        let diagnostics = run.diagnostics.expect("eVKF runs record diagnostics");
        let mut csv = format!("# config_hash {hash}\nt,elbo_L,elbo_M,gap\n");
        let mut gaps = Vec::with_capacity(diagnostics.len());
        for (t, d) in diagnostics.iter().enumerate() {
            let (single, gap) = (d.elbo_m.unwrap_or(f64::NAN), d.gap.unwrap_or(f64::NAN));
            writeln!(csv, "{},{},{single},{gap}", t + 1, d.elbo_l).unwrap();
            gaps.push(gap);
        }
        let dir = trial_dir(&config.out_dir, trial);
        write(&dir.join("bounds.csv"), csv)?;
        let summary = BoundsSummary {
            config_hash: hash.clone(),
            trial,
            steps: gaps.len(),
            min_gap: gaps.iter().copied().fold(f64::INFINITY, f64::min),
            mean_gap: mean_std(&gaps).0,
        };
        write_json(&dir.join("bounds.json"), &summary)?;
        Ok(summary)
    })
}

/// One row of the comparison table: a config and its per-metric mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub config_hash: String,
    pub experiment: String,
    pub filter: String,
    pub trials: usize,
    /// (mean, std, finite values) per metric.
    pub metrics: BTreeMap<String, (f64, f64, usize)>,
}

pub fn read_ledger(path: &Path) -> Result<Ledger> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Ledgers of every trial under a run directory.
pub fn ledgers_in(out: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(out).map_err(HarnessError::io(out))? {
        let path = entry.map_err(HarnessError::io(out))?.path().join("metrics.json");
        if path.is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Aggregates ledgers into mean ± std per config and writes `comparison.csv` and
/// `comparison.md` to `out`. Ledgers from different configs need `force`.
pub fn cmd_compare(ledgers: &[PathBuf], out: &Path, force: bool) -> Result<Vec<ComparisonRow>> {
    if ledgers.is_empty() {
        return Err(HarnessError::Config("compare needs at least one ledger".into()));
    }
    let mut groups: Vec<(String, Vec<Ledger>)> = Vec::new();
    for path in ledgers {
        let ledger = read_ledger(path)?;
        match groups.iter_mut().find(|(h, _)| *h == ledger.config_hash) {
            Some((_, members)) => members.push(ledger),
            None => groups.push((ledger.config_hash.clone(), vec![ledger])),
        }
    }
    if groups.len() > 1 && !force {
        let hashes: Vec<&str> = groups.iter().map(|(h, _)| &h[..12]).collect();
        return Err(HarnessError::MixedHashes(hashes.join(", ")));
    }
    let rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(hash, members)| {
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for ledger in &members {
                for (name, v) in &ledger.metrics {
                    let entry = values.entry(name.clone()).or_default();
                    entry.extend(v.iter().copied());
                }
            }
            let metrics = values
                .into_iter()
                .map(|(name, vs)| {
                    let (mean, std) = mean_std(&vs);
                    (name, (mean, std, vs.len()))
                })
                .collect();
            ComparisonRow {
                config_hash: hash,
                experiment: members[0].experiment.clone(),
                filter: members[0].filter.clone(),
                trials: members.len(),
                metrics,
            }
        })
        .collect();

    let names: Vec<String> = {
        let mut all: Vec<String> = rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        all.sort();
        all.dedup();
        all
    };
    let mut csv = String::from("config_hash,experiment,filter,trials,metric,n,mean,std\n");
    for r in &rows {
        for (name, (mean, std, n)) in &r.metrics {
            writeln!(csv, "{},{},{},{},{name},{n},{mean},{std}", r.config_hash, r.experiment, r.filter, r.trials).unwrap();
        }
    }
    let mut md = String::new();
    for r in &rows {
        writeln!(md, "<!-- config_hash {} -->", r.config_hash).unwrap();
    }
    write!(md, "| experiment | filter | trials |").unwrap();
    for name in &names {
        write!(md, " {name} |").unwrap();
    }
    write!(md, "\n|---|---|---|").unwrap();
    md.push_str(&"---|".repeat(names.len()));
    md.push('\n');
    for r in &rows {
        write!(md, "| {} | {} | {} |", r.experiment, r.filter, r.trials).unwrap();
        for name in &names {
            match r.metrics.get(name) {
                Some((mean, std, _)) => write!(md, " {mean:.4} ± {std:.4} |").unwrap(),
                None => md.push_str(" n/a |"),
            }
        }
        md.push('\n');
    }
    write(&out.join("comparison.csv"), csv)?;
    write(&out.join("comparison.md"), md)?;
    Ok(rows)
}
