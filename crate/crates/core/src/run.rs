//! Run directories.
//!
//! ```text
//! <run>/config.toml              full config snapshot, defaults included
//! <run>/metrics.jsonl            one StepMetrics record per step
//! <run>/trace.jsonl              per-token TraceRecords (when `trace = true`)
//! <run>/checkpoints/step_NNNNNN.json
//! <run>/summary.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, SCHEMA_VERSION};
use crate::error::{HapoError, Result};
use crate::metrics::{JsonlWriter, StepMetrics};
use crate::trainer::Trainer;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub algo: String,
    pub components: String,
    pub seed: u64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub rollbacks: usize,
    pub final_eval_greedy: Option<f64>,
    pub final_eval_sampled: Option<f64>,
    pub best_eval_sampled: Option<f64>,
    pub final_mean_entropy: Option<f64>,
    pub final_checkpoint: String,
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.json"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HapoError::io(path, e))
}

/// Trains for `cfg.steps` steps, writing everything under `run_dir`.
/// Checkpoint `step_000000` holds the initial policy.
pub fn run(cfg: &TrainConfig, run_dir: &Path) -> Result<RunSummary> {
    run_with_progress(cfg, run_dir, |_| {})
}

pub fn run_with_progress(
    cfg: &TrainConfig,
    run_dir: &Path,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(|e| HapoError::io(run_dir, e))?;
    write_file(&run_dir.join(CONFIG_FILE), &cfg.to_toml()?)?;

    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.params().save(&checkpoint_path(run_dir, 0))?;
    let mut metrics_out = JsonlWriter::create(&run_dir.join(METRICS_FILE))?;
    let mut trace_out = if cfg.trace {
        Some(JsonlWriter::create(&run_dir.join(TRACE_FILE))?)
    } else {
        None
    };

    let mut last: Option<StepMetrics> = None;
    let mut best: Option<f64> = None;
    let (mut skipped, mut rollbacks) = (0, 0);
    let mut final_checkpoint = checkpoint_path(run_dir, 0);
    for s in 0..cfg.steps {
        let evaluate = (s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps;
        let mut trace = cfg.trace.then(Vec::new);
        let m = trainer.step(evaluate, trace.as_mut())?;
        metrics_out.append(&m)?;
        metrics_out.flush()?;
        if let (Some(out), Some(records)) = (trace_out.as_mut(), trace) {
            for r in &records {
                out.append(r)?;
            }
            out.flush()?;
        }
        skipped += usize::from(m.skipped);
        rollbacks += m.events.iter().filter(|e| e.contains("rolled back")).count();
        if let Some(e) = m.eval_sampled {
            best = Some(best.map_or(e, |b: f64| b.max(e)));
        }
        let done = s + 1;
        if done % cfg.checkpoint_every.max(1) == 0 || done == cfg.steps {
            final_checkpoint = checkpoint_path(run_dir, done);
            trainer.params().save(&final_checkpoint)?;
        }
        on_step(&m);
        last = Some(m);
    }

    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        algo: cfg.algo.to_string(),
        components: cfg.components()?.label(),
        seed: cfg.seed,
        steps: cfg.steps,
        skipped_steps: skipped,
        rollbacks,
        final_eval_greedy: last.as_ref().and_then(|m| m.eval_greedy),
        final_eval_sampled: last.as_ref().and_then(|m| m.eval_sampled),
        best_eval_sampled: best,
        final_mean_entropy: last.as_ref().map(|m| m.mean_entropy),
        final_checkpoint: final_checkpoint
            .strip_prefix(run_dir)
            .unwrap_or(&final_checkpoint)
            .display()
            .to_string(),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| HapoError::parse(run_dir, e.to_string()))?;
    write_file(&run_dir.join(SUMMARY_FILE), &text)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::read_metrics;

    #[test]
    fn zero_steps_leaves_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 0,
            batch_size: 4,
            ..Default::default()
        };
        let s = run(&cfg, dir.path()).unwrap();
        let ckpts: Vec<_> = std::fs::read_dir(dir.path().join(CHECKPOINT_DIR)).unwrap().collect();
        assert_eq!(ckpts.len(), 1);
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().is_empty());
        assert_eq!(s.final_eval_sampled, None);
        let snapshot = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(TrainConfig::from_toml_str(&snapshot).unwrap(), cfg);
    }

    #[test]
    fn writes_one_record_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            eval_every: 2,
            eval_prompts: 4,
            checkpoint_every: 2,
            trace: true,
            ..Default::default()
        };
        run(&cfg, dir.path()).unwrap();
        let m = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(m.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(m[0].eval_sampled.is_none() && m[1].eval_sampled.is_some() && m[2].eval_sampled.is_some());
        assert!(checkpoint_path(dir.path(), 2).exists() && checkpoint_path(dir.path(), 3).exists());
        assert!(dir.path().join(TRACE_FILE).exists());
    }
}
