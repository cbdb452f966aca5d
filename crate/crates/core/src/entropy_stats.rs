//! Batch log-entropy statistics and the bounded scaled entropy `h̃`.
//!
//! `h = (log H − Q_ρ) / σ` where `Q_ρ` is the ρ-th percentile of `log H` over
//! the batch and `σ` is the root-mean-square deviation of `log H` around
//! `Q_ρ` (not around the mean). Positive `h` is divided by the batch maximum
//! and negative `h` by the magnitude of the batch minimum, so `h̃ ∈ [−1, 1]`
//! keeps the sign of `h`.

use serde::{Deserialize, Serialize};

use crate::error::{HapoError, Result};

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-6;

/// `log(max(H, floor))`.
pub fn log_entropy(entropy: f64, floor: f64) -> f64 {
    entropy.max(floor).ln()
}

/// Percentile with linear interpolation between order statistics
/// (rank `ρ/100 · (n − 1)`). `sorted` must be ascending and nonempty.
pub fn percentile_linear(sorted: &[f64], rho: f64) -> f64 {
    let n = sorted.len();
    let rank = (rho / 100.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    /// ρ-th percentile of `log H`.
    pub quantile: f64,
    /// RMS deviation of `log H` around `quantile`; 1 when degenerate.
    pub sigma: f64,
    /// Largest positive `h` in the batch, 0 if none.
    pub h_max: f64,
    /// Smallest negative `h` in the batch, 0 if none.
    pub h_min: f64,
    pub rho: f64,
    /// σ was zero and has been replaced by 1.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledEntropy {
    pub h: f64,
    pub h_tilde: f64,
}

/// Sampler-side carryover of the previous step's statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStats {
    pub quantile: f64,
    pub sigma: f64,
}

/// Computes batch statistics over raw entropies (nats), flooring each at
/// `floor` before taking logs.
pub fn batch_stats(entropies: &[f64], rho: f64, floor: f64) -> Result<EntropyStats> {
    if entropies.is_empty() {
        return Err(HapoError::Statistics("entropy batch is empty".into()));
    }
    if !(0.0..=100.0).contains(&rho) {
        return Err(HapoError::Statistics(format!("percentile rho must be in [0, 100], got {rho}")));
    }
    if entropies.iter().any(|h| !h.is_finite()) {
        return Err(HapoError::Statistics("non-finite entropy in batch".into()));
    }
    let mut logs: Vec<f64> = entropies.iter().map(|&h| log_entropy(h, floor)).collect();
    // Sorting fixes the reduction order, so results do not depend on the
    // order tokens arrive in.
    logs.sort_by(f64::total_cmp);
    let quantile = percentile_linear(&logs, rho);
    let mean_sq = logs.iter().map(|x| (x - quantile) * (x - quantile)).sum::<f64>() / logs.len() as f64;
    let mut sigma = mean_sq.sqrt();
    let degenerate = sigma == 0.0;
    if degenerate {
        log::warn!("log-entropy deviation is zero over {} tokens; using sigma = 1", logs.len());
        sigma = 1.0;
    }
    let h_of = |x: f64| (x - quantile) / sigma;
    let top = h_of(logs[logs.len() - 1]);
    let bottom = h_of(logs[0]);
    Ok(EntropyStats {
        quantile,
        sigma,
        h_max: if top > 0.0 { top } else { 0.0 },
        h_min: if bottom < 0.0 { bottom } else { 0.0 },
        rho,
        degenerate,
    })
}

impl EntropyStats {
    pub fn scale(&self, log_h: f64) -> ScaledEntropy {
        let h = (log_h - self.quantile) / self.sigma;
        let h_tilde = if h > 0.0 {
            if self.h_max > 0.0 {
                h / self.h_max
            } else {
                0.0
            }
        } else if self.h_min < 0.0 {
            h / self.h_min.abs()
        } else {
            0.0
        };
        ScaledEntropy {
            h,
            h_tilde: h_tilde.clamp(-1.0, 1.0),
        }
    }

    pub fn scale_entropy(&self, entropy: f64, floor: f64) -> ScaledEntropy {
        self.scale(log_entropy(entropy, floor))
    }

    pub fn carryover(&self) -> TemperatureStats {
        TemperatureStats {
            quantile: self.quantile,
            sigma: self.sigma,
        }
    }
}
