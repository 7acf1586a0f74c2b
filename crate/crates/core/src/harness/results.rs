use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TargetType};
use super::experiment::RunResult;
use crate::{Error, Result};

pub const RESULTS_CSV: &str = "results.csv";
pub const RUNS_JSON: &str = "runs.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_TOML: &str = "config.toml";

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: usize,
    pub target_type: TargetType,
    pub seed: u64,
    /// Empty for failed runs.
    pub metric: Option<f64>,
    pub converged: bool,
    pub wall_ms: u64,
}

impl From<&RunResult> for ResultRow {
    fn from(r: &RunResult) -> Self {
        Self {
            run_id: r.run_id,
            target_type: r.target_type,
            seed: r.seed,
            metric: r.metric,
            converged: r.converged,
            wall_ms: r.wall_ms,
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Correlations of one state feature across every fleet run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFile {
    pub dim: usize,
    pub state: String,
    pub members: Vec<String>,
    pub target: usize,
    pub runs: Vec<CorrelationRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRun {
    pub run_id: usize,
    pub seed: u64,
    /// `M x M`, rows in member order.
    pub matrix: Vec<Vec<f64>>,
}

/// Groups the fleet runs' correlation matrices by state feature.
pub fn correlation_files(config: &ExperimentConfig, results: &[RunResult]) -> Result<Vec<CorrelationFile>> {
    let env = config.environment_spec()?;
    let members: Vec<String> = (0..env.num_members()).map(|m| config.member_name(m)).collect();
    let fleet: Vec<&RunResult> = results
        .iter()
        .filter(|r| r.target_type == TargetType::Fleet && !r.correlations.is_empty())
        .collect();
    if fleet.is_empty() {
        return Ok(Vec::new());
    }
    Ok((0..env.state_dim())
        .map(|dim| CorrelationFile {
            dim,
            state: env.state_names[dim].clone(),
            members: members.clone(),
            target: config.target,
            runs: fleet
                .iter()
                .filter_map(|r| {
                    r.correlations.get(dim).map(|m| CorrelationRun {
                        run_id: r.run_id,
                        seed: r.seed,
                        matrix: m.clone(),
                    })
                })
                .collect(),
        })
        .collect())
}

/// Quartiles by linear interpolation between order statistics (the
/// "type 7" rule used by R and NumPy).
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Per-target-type statistics of the metric over successful runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub runs: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub converged: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean_wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target_types: BTreeMap<TargetType, TypeSummary>,
}

impl Summary {
    pub fn get(&self, t: TargetType) -> Option<&TypeSummary> {
        self.target_types.get(&t)
    }
}

pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut groups: BTreeMap<TargetType, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.target_type).or_default().push(r);
    }
    let target_types = groups
        .into_iter()
        .map(|(t, rs)| {
            let mut m: Vec<f64> = rs.iter().filter_map(|r| r.metric).filter(|v| v.is_finite()).collect();
            m.sort_by(f64::total_cmp);
            let s = TypeSummary {
                runs: rs.len(),
                succeeded: m.len(),
                failed: rs.len() - m.len(),
                converged: rs.iter().filter(|r| r.converged).count(),
                median: quantile(&m, 0.5),
                q1: quantile(&m, 0.25),
                q3: quantile(&m, 0.75),
                min: m.first().copied(),
                max: m.last().copied(),
                mean_wall_ms: rs.iter().map(|r| r.wall_ms as f64).sum::<f64>() / rs.len() as f64,
            };
            (t, s)
        })
        .collect();
    Summary { target_types }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes `results.csv`, `runs.json`, `corr_<dim>.json`, `summary.json` and
/// the effective config into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, results: &[RunResult]) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    let rows: Vec<ResultRow> = results.iter().map(ResultRow::from).collect();
    write_results_csv(&dir.join(RESULTS_CSV), &rows)?;
    write_json(&dir.join(RUNS_JSON), &results)?;
    for file in correlation_files(config, results)? {
        write_json(&dir.join(format!("corr_{}.json", file.dim)), &file)?;
    }
    fs::write(dir.join(CONFIG_TOML), config.to_toml_string()?)?;
    let summary = summarize(&rows);
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

pub fn read_runs(dir: &Path) -> Result<Vec<RunResult>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(RUNS_JSON))?)?)
}

/// Recomputes `summary.json` from `results.csv` in `dir`.
pub fn summarize_dir(dir: &Path) -> Result<Summary> {
    let rows = read_results_csv(&dir.join(RESULTS_CSV))?;
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no rows", dir.join(RESULTS_CSV).display())));
    }
    let summary = summarize(&rows);
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}
