//! Clipped surrogate objectives, entropy-adaptive clip bounds, forking-token
//! masks and the per-algorithm batch normalizations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HapoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Grpo,
    Dapo,
    DapoFork,
    Hapo,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Grpo => "grpo",
            Algo::Dapo => "dapo",
            Algo::DapoFork => "dapo_fork",
            Algo::Hapo => "hapo",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = HapoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Algo::Grpo),
            "dapo" => Ok(Algo::Dapo),
            "dapo_fork" | "dapo-fork" => Ok(Algo::DapoFork),
            "hapo" => Ok(Algo::Hapo),
            other => Err(HapoError::Config(format!(
                "unknown algo `{other}` (expected grpo, dapo, dapo_fork or hapo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    Uniform,
    Binary,
    Continuous,
}

/// Base clip parameters and the rule mapping `h̃` to per-token bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipBounds {
    pub mode: ClipMode,
    /// `ε_L^base`
    pub eps_low: f64,
    /// `ε_R^base`
    pub eps_high: f64,
    /// Binary mode `(ε_L, ε_R)` for tokens with `h̃ ≤ 0`.
    pub binary_low_entropy: (f64, f64),
    /// Binary mode `(ε_L, ε_R)` for tokens with `h̃ > 0`.
    pub binary_high_entropy: (f64, f64),
    /// Upper limit on `ε_L` so the lower bound stays positive.
    pub eps_low_cap: f64,
}

impl Default for ClipBounds {
    fn default() -> Self {
        ClipBounds {
            mode: ClipMode::Continuous,
            eps_low: 0.2,
            eps_high: 0.28,
            binary_low_entropy: (0.35, 0.2),
            binary_high_entropy: (0.2, 0.35),
            eps_low_cap: 0.95,
        }
    }
}

impl ClipBounds {
    pub fn uniform(eps_low: f64, eps_high: f64) -> Self {
        ClipBounds {
            mode: ClipMode::Uniform,
            eps_low,
            eps_high,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            (self.eps_low, self.eps_high),
            self.binary_low_entropy,
            self.binary_high_entropy,
        ];
        for (l, r) in pairs {
            if !(l > 0.0 && l < 1.0 && r > 0.0) {
                return Err(HapoError::Config(format!(
                    "clip bounds need 0 < eps_low < 1 and eps_high > 0 (got {l}, {r})"
                )));
            }
        }
        if !(self.eps_low_cap > 0.0 && self.eps_low_cap < 1.0) {
            return Err(HapoError::Config("eps_low_cap must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-token `(ε_L, ε_R)` for scaled entropy `h_tilde`.
pub fn clip_bounds(h_tilde: f64, base: &ClipBounds) -> (f64, f64) {
    match base.mode {
        ClipMode::Uniform => (base.eps_low, base.eps_high),
        ClipMode::Binary => {
            if h_tilde > 0.0 {
                base.binary_high_entropy
            } else {
                base.binary_low_entropy
            }
        }
        ClipMode::Continuous => {
            if h_tilde > 0.0 {
                (base.eps_low, base.eps_high * (1.0 + h_tilde))
            } else {
                ((base.eps_low * (1.0 - h_tilde)).min(base.eps_low_cap), base.eps_high)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSurrogate {
    pub value: f64,
    /// `∂ value / ∂ r`; zero whenever the clipped branch is selected.
    pub ratio_grad: f64,
    pub clipped_left: bool,
    pub clipped_right: bool,
}

/// `min(r·A, clip(r, 1 − ε_L, 1 + ε_R)·A)`.
pub fn token_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> TokenSurrogate {
    let lo = 1.0 - eps_low;
    let hi = 1.0 + eps_high;
    let clipped_ratio = ratio.clamp(lo, hi);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    if clipped < unclipped {
        TokenSurrogate {
            value: clipped,
            ratio_grad: 0.0,
            clipped_left: ratio < lo,
            clipped_right: ratio > hi,
        }
    } else {
        TokenSurrogate {
            value: unclipped,
            ratio_grad: advantage,
            clipped_left: false,
            clipped_right: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForkingMaskParams {
    /// `dapo_fork` without the mask is plain `dapo`.
    pub enabled: bool,
    pub rho_mask: f64,
    /// Drop masked tokens from the token-mean denominator instead of only
    /// zeroing their contribution.
    pub exclude_masked_from_denominator: bool,
}

impl Default for ForkingMaskParams {
    fn default() -> Self {
        ForkingMaskParams {
            enabled: true,
            rho_mask: 80.0,
            exclude_masked_from_denominator: true,
        }
    }
}

impl ForkingMaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.rho_mask) {
            return Err(HapoError::Config(format!("rho_mask must be in [0, 100), got {}", self.rho_mask)));
        }
        Ok(())
    }
}

/// Marks tokens whose entropy reaches the batch's ρ-th percentile threshold.
///
/// The threshold is the `k`-th largest entropy with
/// `k = ⌈(100 − ρ)/100 · N⌉`, so exactly `k` tokens pass when entropies are
/// distinct and ties at the threshold all pass.
pub fn forking_mask(entropies: &[f64], p: &ForkingMaskParams) -> Result<Vec<bool>> {
    p.validate()?;
    if entropies.is_empty() {
        return Err(HapoError::Training("forking mask over an empty batch".into()));
    }
    let n = entropies.len();
    let k = (((100.0 - p.rho_mask) * n as f64 / 100.0) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = entropies.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    Ok(entropies.iter().map(|&h| h >= threshold).collect())
}

/// Weight of each token in the batch objective, so that `loss = Σ w_t · v_t`.
///
/// * `grpo`: mean over sequences of per-sequence token means.
/// * `dapo`, `hapo`: a single mean over all tokens.
/// * `dapo_fork`: tokens outside `mask` get zero weight; the denominator
///   counts only unmasked tokens unless `exclude_masked` is false.
pub fn loss_weights(algo: Algo, lengths: &[usize], mask: Option<&[bool]>, exclude_masked: bool) -> Result<Vec<f64>> {
    let total: usize = lengths.iter().sum();
    if total == 0 || lengths.is_empty() {
        return Err(HapoError::Training("empty batch".into()));
    }
    match algo {
        Algo::Grpo => {
            let s = lengths.iter().filter(|&&n| n > 0).count() as f64;
            Ok(lengths
                .iter()
                .flat_map(|&n| std::iter::repeat_n(1.0 / (s * n as f64), n))
                .collect())
        }
        Algo::Dapo | Algo::Hapo => Ok(vec![1.0 / total as f64; total]),
        Algo::DapoFork => {
            let mask = mask.ok_or_else(|| HapoError::Training("dapo_fork requires a token mask".into()))?;
            if mask.len() != total {
                return Err(HapoError::Training("mask length does not match the batch".into()));
            }
            let kept = mask.iter().filter(|&&m| m).count();
            if kept == 0 {
                return Err(HapoError::Training("every token is masked out".into()));
            }
            let denom = if exclude_masked { kept } else { total } as f64;
            Ok(mask.iter().map(|&m| if m { 1.0 / denom } else { 0.0 }).collect())
        }
    }
}

pub fn batch_loss(
    algo: Algo,
    values: &[f64],
    lengths: &[usize],
    mask: Option<&[bool]>,
    exclude_masked: bool,
) -> Result<f64> {
    let w = loss_weights(algo, lengths, mask, exclude_masked)?;
    if w.len() != values.len() {
        return Err(HapoError::Training("token values do not match the layout".into()));
    }
    Ok(w.iter().zip(values).map(|(w, v)| w * v).sum())
}
