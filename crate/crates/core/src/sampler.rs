//! Rollout engine with fixed, binary and continuous adaptive temperature.
//!
//! At every position the entropy is measured on the base-temperature
//! distribution `softmax(z / T_base)`; that distribution is also the one whose
//! log-probability is recorded for importance ratios. The token itself is
//! drawn from `softmax(z / T)` with `T` given by the temperature schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy_stats::{log_entropy, TemperatureStats, DEFAULT_ENTROPY_FLOOR};
use crate::env::{self, Prompt, TokenId, EOS};
use crate::error::{HapoError, Result};
use crate::policy::{PolicyParams, PolicySnapshot, TokenDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    Fixed,
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    pub mode: TemperatureMode,
    pub t_base: f64,
    /// Maximum relative adjustment per standard deviation of log-entropy.
    pub tau: f64,
    /// Entropy threshold (nats) for binary mode.
    pub threshold: f64,
    pub t_high: f64,
    pub t_low: f64,
    pub group_size: usize,
    /// Hard cap on response length; the task's own `max_len` also applies.
    pub max_len: usize,
    pub entropy_floor: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            mode: TemperatureMode::Continuous,
            t_base: 1.0,
            tau: 0.05,
            threshold: 0.5,
            t_high: 1.1,
            t_low: 0.8,
            group_size: 8,
            max_len: 64,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }
}

impl SamplerParams {
    pub fn fixed(t_base: f64, group_size: usize) -> Self {
        SamplerParams {
            mode: TemperatureMode::Fixed,
            t_base,
            group_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HapoError::Config(format!("sampler: {m}")));
        if !(self.t_base > 0.0) {
            return bad("t_base must be > 0");
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be >= 0");
        }
        if !(self.t_low > 0.0 && self.t_high >= self.t_low) {
            return bad("need t_high >= t_low > 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        if !(self.entropy_floor > 0.0) {
            return bad("entropy_floor must be > 0");
        }
        Ok(())
    }

    pub fn t_min(&self) -> f64 {
        0.5 * self.t_base
    }

    pub fn t_max(&self) -> f64 {
        2.0 * self.t_base
    }
}

/// Temperature for a position whose base-distribution entropy is `entropy`.
///
/// Continuous mode without carried statistics (the very first rollout)
/// falls back to `t_base`.
pub fn adaptive_temperature(entropy: f64, stats: Option<&TemperatureStats>, p: &SamplerParams) -> f64 {
    match p.mode {
        TemperatureMode::Fixed => p.t_base,
        TemperatureMode::Binary => {
            if entropy > p.threshold {
                p.t_high
            } else {
                p.t_low
            }
        }
        TemperatureMode::Continuous => match stats {
            Some(s) if s.sigma > 0.0 => {
                let deviation = (log_entropy(entropy, p.entropy_floor) - s.quantile) / s.sigma;
                (p.t_base * (1.0 + deviation * p.tau)).clamp(p.t_min(), p.t_max())
            }
            _ => p.t_base,
        },
    }
}

/// Inverse-CDF draw from a normalized probability vector.
pub fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k as TokenId;
        }
    }
    last_positive as TokenId
}

/// Draws from `softmax(logits / temperature)`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    sample_from(&TokenDistribution::from_logits(logits, temperature).probs, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: TokenId,
    /// Log-probability under the base-temperature rollout distribution.
    pub old_log_prob: f64,
    /// Base-distribution entropy in nats.
    pub entropy: f64,
    pub temperature: f64,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub sequences: Vec<Vec<TokenRecord>>,
    pub rewards: Vec<u8>,
}

impl RolloutGroup {
    pub fn prompt_id(&self) -> u64 {
        self.prompt.prompt_id
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }

    pub fn response_tokens(&self, i: usize) -> Vec<TokenId> {
        self.sequences[i].iter().map(|r| r.token).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_degenerate(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn effective_max_len(prompt: &Prompt, p: &SamplerParams) -> usize {
    prompt.task.max_len().min(p.max_len)
}

/// Samples `group_size` responses for one prompt. Sequence `i` draws from
/// its own stream derived from `(seed, i)`.
pub fn rollout_group(
    snapshot: &PolicySnapshot,
    prompt: &Prompt,
    p: &SamplerParams,
    stats: Option<&TemperatureStats>,
    seed: u64,
) -> Result<RolloutGroup> {
    p.validate()?;
    let max_len = effective_max_len(prompt, p);
    let mut sequences = Vec::with_capacity(p.group_size);
    let mut rewards = Vec::with_capacity(p.group_size);
    for i in 0..p.group_size {
        let mut rng = sequence_rng(seed, i);
        let mut response: Vec<TokenId> = Vec::with_capacity(max_len);
        let mut records = Vec::with_capacity(max_len);
        for position in 0..max_len {
            let ctx = snapshot.features(&prompt.prompt_tokens, &response);
            let logits = snapshot.logits(&ctx)?;
            let base = TokenDistribution::from_logits(&logits, p.t_base);
            let temperature = adaptive_temperature(base.entropy, stats, p);
            let token = sample_token(&logits, temperature, &mut rng);
            records.push(TokenRecord {
                token,
                old_log_prob: base.log_probs[token as usize],
                entropy: base.entropy,
                temperature,
                position,
            });
            response.push(token);
            if token == EOS {
                break;
            }
        }
        rewards.push(env::score(prompt, &response));
        sequences.push(records);
    }
    Ok(RolloutGroup {
        prompt: prompt.clone(),
        sequences,
        rewards,
    })
}

/// Rolls out every prompt (in parallel); `seeds[j]` seeds prompt `j`.
pub fn rollout_batch(
    snapshot: &PolicySnapshot,
    prompts: &[Prompt],
    p: &SamplerParams,
    stats: Option<&TemperatureStats>,
    seeds: &[u64],
) -> Result<Vec<RolloutGroup>> {
    if prompts.len() != seeds.len() {
        return Err(HapoError::Config("one seed per prompt required".into()));
    }
    prompts
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(prompt, &seed)| rollout_group(snapshot, prompt, p, stats, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sampled { temperature: f64 },
}

/// Generates one response for evaluation.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Prompt,
    decoding: Decoding,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut response = Vec::new();
    for _ in 0..prompt.task.max_len().min(max_len) {
        let ctx = params.features(&prompt.prompt_tokens, &response);
        let logits = params.logits(&ctx)?;
        let token = match decoding {
            Decoding::Greedy => logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &z)| if z > best.1 { (k, z) } else { best })
                .0 as TokenId,
            Decoding::Sampled { temperature } => sample_token(&logits, temperature, rng),
        };
        response.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_prompt, TaskSpec};
    use crate::policy::FeatureSpec;

    fn stats(q: f64, s: f64) -> TemperatureStats {
        TemperatureStats { quantile: q, sigma: s }
    }

    #[test]
    fn continuous_schedule_points() {
        let p = SamplerParams::default();
        let st = stats(-0.7, 1.3);
        let at_q = adaptive_temperature((-0.7f64).exp(), Some(&st), &p);
        assert_eq!(at_q, 1.0);
        let above = adaptive_temperature((-0.7f64 + 1.3).exp(), Some(&st), &p);
        assert!((above - 1.05).abs() < 1e-12, "{above}");
        // bootstrap without stats
        assert_eq!(adaptive_temperature(2.0, None, &p), 1.0);
        // clamp
        let wild = SamplerParams { tau: 10.0, ..p.clone() };
        assert_eq!(adaptive_temperature(100.0, Some(&st), &wild), 2.0);
        assert_eq!(adaptive_temperature(1e-9, Some(&st), &wild), 0.5);
    }

    #[test]
    fn binary_and_fixed_modes() {
        let p = SamplerParams {
            mode: TemperatureMode::Binary,
            ..Default::default()
        };
        assert_eq!(adaptive_temperature(0.6, None, &p), 1.1);
        assert_eq!(adaptive_temperature(0.5, None, &p), 0.8);
        let f = SamplerParams::fixed(0.7, 4);
        assert_eq!(adaptive_temperature(3.0, Some(&stats(0.0, 1.0)), &f), 0.7);
    }

    #[test]
    fn continuous_is_monotone_in_entropy() {
        let p = SamplerParams { tau: 0.3, ..Default::default() };
        let st = stats(0.1, 0.8);
        let mut prev = 0.0;
        for i in 0..400 {
            let h = 1e-7 * 1.06f64.powi(i);
            let t = adaptive_temperature(h, Some(&st), &p);
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn cold_sampling_picks_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.1, 0.5, 0.3, -1.0];
        let hits = (0..10_000).filter(|_| sample_token(&logits, 0.01, &mut rng) == 1).count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn constant_logits_sample_uniformly() {
        // chi-square with 7 degrees of freedom; critical value at alpha=0.01 is 18.475
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 8];
        for _ in 0..100_000 {
            counts[sample_token(&[0.0; 8], 0.37, &mut rng) as usize] += 1;
        }
        let expected = 100_000.0 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn replay_is_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_token(&[0.2, 0.1, -0.3, 0.0], 1.0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    fn uniform_policy() -> PolicySnapshot {
        PolicyParams::zeros(FeatureSpec::default(), 13).unwrap().snapshot()
    }

    #[test]
    fn uniform_policy_rollouts() {
        let prompt = make_prompt(&TaskSpec::branching_sum(2, Some(5)), 3).unwrap();
        let p = SamplerParams { group_size: 16, ..Default::default() };
        let g = rollout_group(&uniform_policy(), &prompt, &p, None, 11).unwrap();
        assert_eq!(g.sequences.len(), 16);
        assert_eq!(g.rewards.len(), 16);
        for seq in &g.sequences {
            assert!(!seq.is_empty() && seq.len() <= 5);
            for r in seq {
                assert!((r.entropy - 13f64.ln()).abs() < 1e-12);
                assert!((r.old_log_prob + 13f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tau_replays_fixed_mode() {
        let mut params = PolicyParams::zeros(FeatureSpec::default(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for w in params.weights_mut() {
            *w = rng.random_range(-1.5..1.5);
        }
        let snap = params.snapshot();
        let prompt = make_prompt(&TaskSpec::branching_sum(4, None), 8).unwrap();
        let st = stats(0.3, 0.9);
        let cont = SamplerParams { tau: 0.0, ..Default::default() };
        let fixed = SamplerParams { mode: TemperatureMode::Fixed, ..cont.clone() };
        let a = rollout_group(&snap, &prompt, &cont, Some(&st), 77).unwrap();
        let b = rollout_group(&snap, &prompt, &fixed, Some(&st), 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_matches_sequential() {
        let snap = uniform_policy();
        let prompts: Vec<Prompt> = (0..6)
            .map(|s| make_prompt(&TaskSpec::branching_sum(3, None), s).unwrap())
            .collect();
        let seeds: Vec<u64> = (100..106).collect();
        let p = SamplerParams::default();
        let par = rollout_batch(&snap, &prompts, &p, None, &seeds).unwrap();
        for (j, g) in par.iter().enumerate() {
            assert_eq!(g, &rollout_group(&snap, &prompts[j], &p, None, seeds[j]).unwrap());
        }
    }

    #[test]
    fn invalid_params() {
        assert!(SamplerParams { group_size: 1, ..Default::default() }.validate().is_err());
        assert!(SamplerParams { t_high: 0.5, ..Default::default() }.validate().is_err());
        assert!(SamplerParams { t_base: 0.0, ..Default::default() }.validate().is_err());
    }
}
