//! Per-step metrics and per-token trace records, stored as JSON lines.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::error::{HapoError, Result};
use crate::TokenId;

/// Counts of clipped tokens split by the sign of `h̃`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipCounts {
    pub left_high: u64,
    pub left_low: u64,
    pub right_high: u64,
    pub right_low: u64,
}

impl ClipCounts {
    pub fn record(&mut self, h_tilde: f64, left: bool, right: bool) {
        let high = h_tilde > 0.0;
        match (left, right, high) {
            (true, _, true) => self.left_high += 1,
            (true, _, false) => self.left_low += 1,
            (_, true, true) => self.right_high += 1,
            (_, true, false) => self.right_low += 1,
            _ => {}
        }
    }
}

/// One record per training step. Fields that do not exist on a skipped
/// step are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub schema_version: u32,
    pub step: usize,
    pub skipped: bool,
    pub groups_total: usize,
    pub groups_kept: usize,
    /// Mean rollout reward over every sampled sequence.
    pub mean_reward: f64,
    pub eval_greedy: Option<f64>,
    pub eval_sampled: Option<f64>,
    pub mean_response_len: f64,
    pub max_response_len: usize,
    /// Mean base-temperature entropy over every rollout token.
    pub mean_entropy: f64,
    pub mean_temperature: f64,
    pub entropy_quantile: f64,
    pub entropy_sigma: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub adv_mean: Option<f64>,
    pub adv_max: Option<f64>,
    pub adv_min: Option<f64>,
    pub clip: Option<ClipCounts>,
    /// Tokens with `h̃ > 0`.
    pub critical_tokens: Option<u64>,
    pub critical_mean_entropy: Option<f64>,
    /// Mean of the mini-batch objectives.
    pub loss: Option<f64>,
    pub learning_rate: f64,
    pub events: Vec<String>,
}

/// One sampled token with the values the optimizer saw for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub prompt_id: u64,
    pub seq: usize,
    pub position: usize,
    pub token: TokenId,
    pub entropy: f64,
    pub temperature: f64,
    pub old_log_prob: f64,
    pub reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
    #[serde(default)]
    pub clipped_left: bool,
    #[serde(default)]
    pub clipped_right: bool,
}

/// Append-only JSON-lines writer; each record is flushed as a whole line.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| HapoError::io(path, e))?;
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| HapoError::parse(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| HapoError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HapoError::io(&self.path, e))
    }
}

/// Reads every complete record. A truncated final line (from a crashed
/// writer) is ignored; malformed lines elsewhere are errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| HapoError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| HapoError::io(path, e))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if Some(i) == last && !line.trim_end().ends_with('}') => break,
            Err(e) => return Err(HapoError::parse(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Reads a metrics stream and checks its schema version.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let records: Vec<serde_json::Value> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let version = v.get("schema_version").and_then(|x| x.as_u64());
            if version != Some(SCHEMA_VERSION as u64) {
                return Err(HapoError::parse(
                    path,
                    format!("record {}: schema_version {version:?}, expected {SCHEMA_VERSION}", i + 1),
                ));
            }
            serde_json::from_value(v).map_err(|e| HapoError::parse(path, format!("record {}: {e}", i + 1)))
        })
        .collect()
}
