//! Linear-softmax policy over hashed context n-grams.
//!
//! The context of a decision is `prompt ∥ partial response`. For each suffix
//! length `k = 1..=window` the last `k` tokens (optionally tagged with the
//! response position) are hashed into one of `buckets` indicator features.
//! Logits are `z = Wᵀφ`, so `∂ log π(a) / ∂W[f, k] = φ_f (1[k = a] − π_k) / T`
//! in closed form.

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::TokenId;
use crate::error::{HapoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub window: usize,
    pub buckets: usize,
    /// Mix the response position into every n-gram hash.
    pub positional: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            window: 3,
            buckets: 4096,
            positional: true,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.buckets == 0 {
            return Err(HapoError::Config(format!(
                "feature window and bucket count must be positive (window={}, buckets={})",
                self.window, self.buckets
            )));
        }
        Ok(())
    }

    pub fn extract(&self, prompt: &[TokenId], response: &[TokenId]) -> ContextFeatures {
        let total = prompt.len() + response.len();
        let token_at = |i: usize| {
            if i < prompt.len() {
                prompt[i]
            } else {
                response[i - prompt.len()]
            }
        };
        let mut active = Vec::with_capacity(self.window);
        for k in 1..=self.window.min(total) {
            let mut h = Fnv::new();
            h.write(k as u64);
            if self.positional {
                h.write(response.len() as u64);
            }
            for i in total - k..total {
                h.write(token_at(i) as u64);
            }
            active.push((h.finish() % self.buckets as u64) as usize);
        }
        active.sort_unstable();
        active.dedup();
        ContextFeatures { active }
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Sparse 0/1 indicator over feature buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextFeatures {
    active: Vec<usize>,
}

impl ContextFeatures {
    pub fn from_buckets(mut buckets: Vec<usize>) -> Self {
        buckets.sort_unstable();
        buckets.dedup();
        ContextFeatures { active: buckets }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }
}

/// Categorical distribution over the vocabulary at a given temperature.
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub temperature: f64,
}

impl TokenDistribution {
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = scaled.iter().map(|s| s - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let entropy = -probs
            .iter()
            .zip(&log_probs)
            .map(|(p, l)| if *p > 0.0 { p * l } else { 0.0 })
            .sum::<f64>();
        let max_entropy = (logits.len() as f64).ln();
        TokenDistribution {
            log_probs,
            probs,
            entropy: entropy.clamp(0.0, max_entropy),
            temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    feature_spec: FeatureSpec,
    vocab_size: usize,
    /// Row-major `[buckets × vocab_size]`.
    weights: Vec<f64>,
}

impl PolicyParams {
    /// All-zero weights, i.e. the uniform policy.
    pub fn zeros(feature_spec: FeatureSpec, vocab_size: usize) -> Result<Self> {
        feature_spec.validate()?;
        if vocab_size < 2 {
            return Err(HapoError::Config(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        Ok(PolicyParams {
            feature_spec,
            vocab_size,
            weights: vec![0.0; feature_spec.buckets * vocab_size],
        })
    }

    pub fn feature_spec(&self) -> &FeatureSpec {
        &self.feature_spec
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.weights[bucket * self.vocab_size..(bucket + 1) * self.vocab_size]
    }

    pub fn features(&self, prompt: &[TokenId], response: &[TokenId]) -> ContextFeatures {
        self.feature_spec.extract(prompt, response)
    }

    pub fn logits(&self, ctx: &ContextFeatures) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.vocab_size];
        for &f in ctx.active() {
            if f >= self.feature_spec.buckets {
                return Err(HapoError::Config(format!(
                    "feature bucket {f} out of range for {} buckets",
                    self.feature_spec.buckets
                )));
            }
            for (zk, w) in z.iter_mut().zip(self.row(f)) {
                *zk += w;
            }
        }
        Ok(z)
    }

    pub fn distribution(&self, ctx: &ContextFeatures, temperature: f64) -> Result<TokenDistribution> {
        Ok(TokenDistribution::from_logits(&self.logits(ctx)?, temperature))
    }

    /// `(log π(token | ctx), H(ctx))` at temperature 1.
    pub fn log_prob_and_entropy(&self, ctx: &ContextFeatures, token: TokenId) -> Result<(f64, f64)> {
        self.check_token(token)?;
        let d = self.distribution(ctx, 1.0)?;
        Ok((d.log_probs[token as usize], d.entropy))
    }

    /// Sparse gradient of `log π(token | ctx)` at temperature 1.
    pub fn grad_log_prob(&self, ctx: &ContextFeatures, token: TokenId) -> Result<SparseGradient> {
        self.check_token(token)?;
        let d = self.distribution(ctx, 1.0)?;
        let column: Vec<f64> = d
            .probs
            .iter()
            .enumerate()
            .map(|(k, p)| if k == token as usize { 1.0 - p } else { -p })
            .collect();
        Ok(SparseGradient {
            rows: ctx.active().iter().map(|&f| (f, column.clone())).collect(),
        })
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.vocab_size {
            return Err(HapoError::Config(format!(
                "token {token} out of range for vocab_size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    /// Gradient ascent `W ← W + lr · g`. Rejects non-finite gradients
    /// without touching the weights.
    pub fn apply_update(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(HapoError::Training(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if grad.data.len() != self.weights.len() {
            return Err(HapoError::Training("gradient shape does not match parameters".into()));
        }
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(HapoError::Training("non-finite gradient".into()));
        }
        for (w, g) in self.weights.iter_mut().zip(&grad.data) {
            *w += lr * g;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows = (0..self.feature_spec.buckets)
            .filter(|&f| self.row(f).iter().any(|w| *w != 0.0))
            .map(|f| (f, self.row(f).to_vec()))
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_spec: self.feature_spec,
            vocab_size: self.vocab_size,
            rows,
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| HapoError::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| HapoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HapoError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| HapoError::parse(path, e))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(HapoError::parse(
                path,
                format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version),
            ));
        }
        let mut params = PolicyParams::zeros(ckpt.feature_spec, ckpt.vocab_size)?;
        for (f, row) in ckpt.rows {
            if f >= ckpt.feature_spec.buckets || row.len() != ckpt.vocab_size {
                return Err(HapoError::parse(path, format!("malformed checkpoint row {f}")));
            }
            let v = params.vocab_size;
            params.weights[f * v..(f + 1) * v].copy_from_slice(&row);
        }
        Ok(params)
    }
}

const CHECKPOINT_FORMAT: &str = "hapo-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: JSON with only the nonzero weight rows.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    feature_spec: FeatureSpec,
    vocab_size: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

/// Frozen parameters used for rollouts and as `π_old` in importance ratios.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Dense gradient accumulator with the same layout as the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    vocab_size: usize,
    data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            vocab_size: params.vocab_size,
            data: vec![0.0; params.weights.len()],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Adds `coef · ∇ log π_T(token | ctx)` where `dist` is the tempered
    /// distribution the log-probability was taken from.
    pub fn add_log_prob(&mut self, ctx: &ContextFeatures, dist: &TokenDistribution, token: TokenId, coef: f64) {
        let scale = coef / dist.temperature;
        let v = self.vocab_size;
        for &f in ctx.active() {
            let row = &mut self.data[f * v..(f + 1) * v];
            for (k, (g, p)) in row.iter_mut().zip(&dist.probs).enumerate() {
                let indicator = if k == token as usize { 1.0 } else { 0.0 };
                *g += scale * (indicator - p);
            }
        }
    }

    pub fn add_sparse(&mut self, sparse: &SparseGradient, coef: f64) {
        let v = self.vocab_size;
        for (f, row) in &sparse.rows {
            for (g, x) in self.data[f * v..(f + 1) * v].iter_mut().zip(row) {
                *g += coef * x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}
