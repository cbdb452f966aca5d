//! Side-by-side summary of finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::error::{HapoError, Result};
use crate::metrics::read_metrics;
use crate::run::{CONFIG_FILE, METRICS_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub dir: PathBuf,
    pub algo: String,
    pub components: String,
    pub seed: u64,
    pub steps: usize,
    pub final_eval_sampled: Option<f64>,
    pub best_eval_sampled: Option<f64>,
    pub final_eval_greedy: Option<f64>,
    pub mean_response_len: f64,
    pub mean_entropy: f64,
    pub final_entropy: f64,
}

pub fn summarize(dir: &Path) -> Result<RunRow> {
    let metrics_path = dir.join(METRICS_FILE);
    if !metrics_path.is_file() {
        return Err(HapoError::Config(format!("no {METRICS_FILE} in run directory {}", dir.display())));
    }
    let metrics = read_metrics(&metrics_path)?;
    if metrics.is_empty() {
        return Err(HapoError::Config(format!("run directory {} has no metrics records", dir.display())));
    }
    let config_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&config_path).map_err(|e| HapoError::io(&config_path, e))?;
    let cfg = TrainConfig::from_toml_str(&text)
        .map_err(|e| HapoError::parse(&config_path, e.to_string()))?;
    let n = metrics.len() as f64;
    let last = metrics.last().unwrap();
    let final_eval = metrics.iter().rev().find(|m| m.eval_sampled.is_some());
    Ok(RunRow {
        dir: dir.to_path_buf(),
        algo: cfg.algo.to_string(),
        components: if cfg.algo == crate::loss::Algo::Hapo {
            cfg.components()?.label()
        } else {
            String::new()
        },
        seed: cfg.seed,
        steps: metrics.len(),
        final_eval_sampled: final_eval.and_then(|m| m.eval_sampled),
        best_eval_sampled: metrics.iter().filter_map(|m| m.eval_sampled).reduce(f64::max),
        final_eval_greedy: final_eval.and_then(|m| m.eval_greedy),
        mean_response_len: metrics.iter().map(|m| m.mean_response_len).sum::<f64>() / n,
        mean_entropy: metrics.iter().map(|m| m.mean_entropy).sum::<f64>() / n,
        final_entropy: last.mean_entropy,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or("NA".into(), |v| format!("{v:.4}"))
}

/// One row per run, ordered by directory path.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        return Err(HapoError::Config("compare needs at least two run directories".into()));
    }
    let mut rows = dirs.iter().map(|d| summarize(d)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.dir.cmp(&b.dir));
    let mut out = String::new();
    writeln!(
        out,
        "run,algo,components,seed,steps,final_eval_sampled,best_eval_sampled,final_eval_greedy,mean_response_len,mean_entropy,final_entropy"
    )
    .unwrap();
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4}",
            r.dir.display(),
            r.algo,
            r.components,
            r.seed,
            r.steps,
            opt(r.final_eval_sampled),
            opt(r.best_eval_sampled),
            opt(r.final_eval_greedy),
            r.mean_response_len,
            r.mean_entropy,
            r.final_entropy
        )
        .unwrap();
    }
    Ok(out)
}
