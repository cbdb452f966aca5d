//! The training loop: rollout with carried entropy statistics, dynamic
//! sampling, advantages, per-mini-batch heterogeneous treatment and the
//! parameter update.
//!
//! Every random draw is seeded from `(seed, domain, step, index)`, so the
//! only state carried between steps is the policy, the step counter and the
//! entropy statistics.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::advantage::{
    neutral_zone, redistribute_pre_norm, redistribution_factor, sequence_advantage_view,
    token_level_group_advantage, AdvantageScope, AdvantageView, NormOrder, RedistributionMode, RedistributionParams,
};
use crate::config::{AdvantageKind, Pipeline, TrainConfig, SCHEMA_VERSION};
use crate::entropy_stats::{batch_stats, EntropyStats, TemperatureStats};
use crate::env::{self, format_template, make_prompt, Prompt, TokenId};
use crate::error::{HapoError, Result};
use crate::loss::{clip_bounds, forking_mask, loss_weights, token_surrogate, Algo, ClipBounds};
use crate::metrics::{ClipCounts, StepMetrics, TraceRecord};
use crate::policy::{ContextFeatures, Gradient, PolicyParams};
use crate::sampler::{generate, rollout_batch, Decoding, RolloutGroup};

const DOMAIN_PROMPT: u64 = 1;
const DOMAIN_ROLLOUT: u64 = 2;
const DOMAIN_EVAL_PROMPT: u64 = 3;
const DOMAIN_EVAL_SAMPLE: u64 = 4;
const DOMAIN_WARM: u64 = 5;
const DOMAIN_BOOTSTRAP: u64 = 6;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for one draw site.
pub fn derive_seed(seed: u64, domain: u64, step: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ domain.rotate_left(48)) ^ step) ^ index)
}

/// Training prompts use even seeds, held-out prompts odd ones.
fn training_prompt_seed(seed: u64, step: usize, j: usize) -> u64 {
    derive_seed(seed, DOMAIN_PROMPT, step as u64, j as u64) & !1
}

fn eval_prompt_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, DOMAIN_EVAL_PROMPT, 0, j as u64) | 1
}

/// Indices of groups whose rewards are not all equal, in order.
pub fn surviving_groups(groups: &[RolloutGroup]) -> Vec<usize> {
    (0..groups.len()).filter(|&i| !groups[i].is_degenerate()).collect()
}

/// Drops every group whose rewards are all 0 or all 1.
pub fn dynamic_sampling_filter(groups: Vec<RolloutGroup>) -> Result<Vec<RolloutGroup>> {
    if groups.is_empty() {
        return Err(HapoError::Training("dynamic sampling over an empty batch".into()));
    }
    Ok(groups.into_iter().filter(|g| !g.is_degenerate()).collect())
}

/// One response token prepared for optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainToken {
    pub ctx: ContextFeatures,
    pub token: TokenId,
    /// Log-probability under the rollout snapshot at `t_base`.
    pub old_log_prob: f64,
    /// Base-temperature entropy under the rollout snapshot.
    pub entropy: f64,
    /// Normalized advantage before post-norm redistribution.
    pub advantage: f64,
}

/// What a mini-batch objective needs beyond the tokens themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSettings {
    pub loss_algo: Algo,
    pub clip: ClipBounds,
    /// Post-norm redistribution; `Off` for pre-norm or baseline pipelines.
    pub redistribution: RedistributionParams,
    pub t_base: f64,
    pub entropy_floor: f64,
    pub freeze_scaled_entropy: bool,
    pub exclude_masked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenDiagnostics {
    pub ratio: f64,
    pub h_tilde: f64,
    pub bounds: (f64, f64),
    /// Advantage after redistribution.
    pub advantage: f64,
    pub value: f64,
    pub weight: f64,
    pub clipped_left: bool,
    pub clipped_right: bool,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub gradient: Option<Gradient>,
    pub tokens: Vec<TokenDiagnostics>,
}

/// Clipped surrogate over one mini-batch and, if requested, its gradient
/// with respect to the policy weights.
///
/// Redistribution factors and clip bounds are treated as constants: they
/// are piecewise constant in the parameters.
pub fn minibatch_objective(
    params: &PolicyParams,
    tokens: &[TrainToken],
    lengths: &[usize],
    mask: Option<&[bool]>,
    stats: &EntropyStats,
    s: &ObjectiveSettings,
    with_gradient: bool,
) -> Result<Objective> {
    if lengths.iter().sum::<usize>() != tokens.len() {
        return Err(HapoError::Training("mini-batch lengths do not cover its tokens".into()));
    }
    let weights = loss_weights(s.loss_algo, lengths, mask, s.exclude_masked)?;
    let mut gradient = with_gradient.then(|| Gradient::zeros_like(params));
    let mut loss = 0.0;
    let mut diags = Vec::with_capacity(tokens.len());
    for (tok, &w) in tokens.iter().zip(&weights) {
        let dist = params.distribution(&tok.ctx, s.t_base)?;
        let log_prob = dist.log_probs[tok.token as usize];
        let ratio = (log_prob - tok.old_log_prob).exp();
        let h_tilde = if s.freeze_scaled_entropy {
            0.0
        } else {
            stats.scale_entropy(tok.entropy, s.entropy_floor).h_tilde
        };
        let bounds = clip_bounds(h_tilde, &s.clip);
        let lambda = redistribution_factor(h_tilde, ratio, neutral_zone(bounds.0, bounds.1), &s.redistribution);
        let advantage = tok.advantage * lambda;
        let sur = token_surrogate(ratio, advantage, bounds.0, bounds.1);
        if w != 0.0 {
            loss += w * sur.value;
            if let Some(g) = gradient.as_mut() {
                // d(r)/dθ = r · ∇ log π
                let coef = w * sur.ratio_grad * ratio;
                if coef != 0.0 {
                    g.add_log_prob(&tok.ctx, &dist, tok.token, coef);
                }
            }
        }
        diags.push(TokenDiagnostics {
            ratio,
            h_tilde,
            bounds,
            advantage,
            value: sur.value,
            weight: w,
            clipped_left: sur.clipped_left,
            clipped_right: sur.clipped_right,
        });
    }
    Ok(Objective {
        loss,
        gradient,
        tokens: diags,
    })
}

/// Splits `n` sequences into at most `parts` contiguous, nonempty chunks
/// whose sizes differ by at most one.
pub fn partition(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        if len > 0 {
            out.push(start..start + len);
        }
        start += len;
    }
    out
}

/// Mutable training state. Statistics are present from the first step on.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub step: usize,
    pub carried: Option<TemperatureStats>,
    pub last_stats: Option<EntropyStats>,
}

/// Held-out accuracy under greedy decoding and under sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub greedy: f64,
    pub sampled: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    pipeline: Pipeline,
    state: TrainState,
    eval_prompts: Vec<Prompt>,
}

struct SeqRef {
    group: usize,
    seq: usize,
}

impl Trainer {
    /// Builds the initial policy (zero weights, then the optional format
    /// warm start) and bootstraps the entropy statistics with one rollout at
    /// the base temperature.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = PolicyParams::zeros(cfg.policy, cfg.vocab_size())?;
        Self::with_params(cfg, params)
    }

    /// Like [`Trainer::new`] but starting from given weights; the warm start
    /// still runs if configured.
    pub fn with_params(cfg: TrainConfig, mut params: PolicyParams) -> Result<Self> {
        cfg.validate()?;
        if params.vocab_size() != cfg.vocab_size() || *params.feature_spec() != cfg.policy {
            return Err(HapoError::Config("initial parameters do not match the configured policy".into()));
        }
        let pipeline = cfg.pipeline()?;
        warm_start(&cfg, &mut params)?;
        let eval_prompts = (0..cfg.eval_prompts)
            .map(|j| make_prompt(&cfg.tasks[j % cfg.tasks.len()], eval_prompt_seed(cfg.seed, j)))
            .collect::<Result<Vec<_>>>()?;
        let mut trainer = Trainer {
            cfg,
            pipeline,
            state: TrainState {
                params,
                step: 0,
                carried: None,
                last_stats: None,
            },
            eval_prompts,
        };
        trainer.bootstrap()?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &PolicyParams {
        &self.state.params
    }

    fn prompts(&self, domain_step: usize) -> Result<Vec<Prompt>> {
        (0..self.cfg.batch_size)
            .map(|j| {
                make_prompt(
                    &self.cfg.tasks[j % self.cfg.tasks.len()],
                    training_prompt_seed(self.cfg.seed, domain_step, j),
                )
            })
            .collect()
    }

    fn bootstrap(&mut self) -> Result<()> {
        let fixed = crate::sampler::SamplerParams {
            mode: crate::sampler::TemperatureMode::Fixed,
            ..self.pipeline.sampler.clone()
        };
        let prompts = (0..self.cfg.batch_size)
            .map(|j| {
                make_prompt(
                    &self.cfg.tasks[j % self.cfg.tasks.len()],
                    derive_seed(self.cfg.seed, DOMAIN_BOOTSTRAP, 0, j as u64) & !1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let seeds: Vec<u64> = (0..prompts.len())
            .map(|j| derive_seed(self.cfg.seed, DOMAIN_BOOTSTRAP, 1, j as u64))
            .collect();
        let groups = rollout_batch(&self.state.params.snapshot(), &prompts, &fixed, None, &seeds)?;
        let entropies: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.sequences.iter().flatten().map(|r| r.entropy))
            .collect();
        let stats = batch_stats(&entropies, self.cfg.rho, self.pipeline.sampler.entropy_floor)?;
        self.state.carried = Some(stats.carryover());
        Ok(())
    }

    fn objective_settings(&self) -> ObjectiveSettings {
        let pre_norm = self.pipeline.redistribution.order == NormOrder::PreNorm;
        ObjectiveSettings {
            loss_algo: self.pipeline.loss_algo,
            clip: self.pipeline.clip.clone(),
            redistribution: if pre_norm {
                RedistributionParams {
                    mode: RedistributionMode::Off,
                    ..self.pipeline.redistribution.clone()
                }
            } else {
                self.pipeline.redistribution.clone()
            },
            t_base: self.pipeline.sampler.t_base,
            entropy_floor: self.pipeline.sampler.entropy_floor,
            freeze_scaled_entropy: self.cfg.freeze_scaled_entropy,
            exclude_masked: self
                .pipeline
                .forking
                .as_ref()
                .is_none_or(|f| f.exclude_masked_from_denominator),
        }
    }

    fn learning_rate(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w == 0 {
            self.cfg.learning_rate
        } else {
            self.cfg.learning_rate * ((self.state.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    fn advantages(&self, groups: &[&RolloutGroup], stats: &EntropyStats) -> Result<Vec<f64>> {
        let unit = |gs: &[&RolloutGroup]| -> Result<AdvantageView> {
            let rewards: Vec<f64> = gs.iter().flat_map(|g| g.rewards.iter().map(|&r| r as f64)).collect();
            let lengths: Vec<usize> = gs.iter().flat_map(|g| g.lengths()).collect();
            let pre_norm = self.pipeline.redistribution.mode != RedistributionMode::Off
                && self.pipeline.redistribution.order == NormOrder::PreNorm;
            match self.pipeline.advantage {
                AdvantageKind::Sequence => sequence_advantage_view(&rewards, &lengths),
                AdvantageKind::TokenLevel if pre_norm => {
                    let floor = self.pipeline.sampler.entropy_floor;
                    let alpha: Vec<f64> = gs
                        .iter()
                        .flat_map(|g| g.sequences.iter().flatten())
                        .map(|r| {
                            let h = if self.cfg.freeze_scaled_entropy {
                                0.0
                            } else {
                                stats.scale_entropy(r.entropy, floor).h_tilde
                            };
                            self.pipeline.redistribution.entropy_scale(h)
                        })
                        .collect();
                    redistribute_pre_norm(&rewards, &lengths, &alpha)
                }
                AdvantageKind::TokenLevel => token_level_group_advantage(&rewards, &lengths),
            }
        };
        let mut out = Vec::new();
        match self.cfg.advantage_scope {
            AdvantageScope::Group => {
                for g in groups {
                    out.extend(unit(std::slice::from_ref(g))?.advantages);
                }
            }
            AdvantageScope::Batch => out = unit(groups)?.advantages,
        }
        Ok(out)
    }

    /// Held-out accuracy of the current policy. `sample_step` only seeds
    /// the sampled decodes.
    pub fn evaluate(&self, sample_step: usize) -> Result<EvalResult> {
        let params = &self.state.params;
        let max_len = self.cfg.sampler.max_len;
        let k = self.cfg.eval_samples;
        let temperature = self.cfg.eval_temperature;
        let per_prompt: Vec<(f64, f64)> = self
            .eval_prompts
            .par_iter()
            .enumerate()
            .map(|(j, prompt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.cfg.seed,
                    DOMAIN_EVAL_SAMPLE,
                    sample_step as u64,
                    j as u64,
                ));
                let greedy = generate(params, prompt, Decoding::Greedy, max_len, &mut rng)?;
                let mut hits = 0u32;
                for _ in 0..k {
                    let r = generate(params, prompt, Decoding::Sampled { temperature }, max_len, &mut rng)?;
                    hits += env::score(prompt, &r) as u32;
                }
                Ok((env::score(prompt, &greedy) as f64, hits as f64 / k as f64))
            })
            .collect::<Result<_>>()?;
        let n = per_prompt.len() as f64;
        Ok(EvalResult {
            greedy: per_prompt.iter().map(|p| p.0).sum::<f64>() / n,
            sampled: per_prompt.iter().map(|p| p.1).sum::<f64>() / n,
        })
    }

    /// Runs one training step. When `trace` is given, one record per rollout
    /// token is appended to it.
    pub fn step(&mut self, evaluate: bool, mut trace: Option<&mut Vec<TraceRecord>>) -> Result<StepMetrics> {
        let step = self.state.step;
        let seed = self.cfg.seed;
        let floor = self.pipeline.sampler.entropy_floor;
        let lr = self.learning_rate();
        let mut events = Vec::new();

        let prompts = self.prompts(step)?;
        let seeds: Vec<u64> = (0..prompts.len())
            .map(|j| derive_seed(seed, DOMAIN_ROLLOUT, step as u64, j as u64))
            .collect();
        let snapshot = self.state.params.snapshot();
        let groups = rollout_batch(
            &snapshot,
            &prompts,
            &self.pipeline.sampler,
            self.state.carried.as_ref(),
            &seeds,
        )?;

        let records = || groups.iter().flat_map(|g| g.sequences.iter().flatten());
        let n_tokens = records().count();
        let n_seqs: usize = groups.iter().map(|g| g.sequences.len()).sum();
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).map(|&r| r as f64).sum::<f64>() / n_seqs as f64;
        let max_response_len = groups.iter().flat_map(|g| g.lengths()).max().unwrap_or(0);
        let mean_entropy = records().map(|r| r.entropy).sum::<f64>() / n_tokens as f64;
        let mean_temperature = records().map(|r| r.temperature).sum::<f64>() / n_tokens as f64;

        let kept = surviving_groups(&groups);
        let kept_groups: Vec<&RolloutGroup> = kept.iter().map(|&i| &groups[i]).collect();
        let seq_refs: Vec<SeqRef> = kept
            .iter()
            .flat_map(|&g| (0..groups[g].sequences.len()).map(move |s| SeqRef { group: g, seq: s }))
            .collect();

        let mut metrics = StepMetrics {
            schema_version: SCHEMA_VERSION,
            step,
            skipped: kept.is_empty(),
            groups_total: groups.len(),
            groups_kept: kept.len(),
            mean_reward,
            eval_greedy: None,
            eval_sampled: None,
            mean_response_len: n_tokens as f64 / n_seqs as f64,
            max_response_len,
            mean_entropy,
            mean_temperature,
            entropy_quantile: 0.0,
            entropy_sigma: 0.0,
            h_max: 0.0,
            h_min: 0.0,
            adv_mean: None,
            adv_max: None,
            adv_min: None,
            clip: None,
            critical_tokens: None,
            critical_mean_entropy: None,
            loss: None,
            learning_rate: lr,
            events: Vec::new(),
        };

        // Per rollout token: optimizer diagnostics, filled for trained tokens.
        let mut diag_of: Vec<Vec<Vec<Option<(TokenDiagnostics, f64)>>>> = groups
            .iter()
            .map(|g| g.sequences.iter().map(|s| vec![None; s.len()]).collect())
            .collect();

        let stats = if kept.is_empty() {
            events.push(format!(
                "all {} groups have zero reward variance; step skipped",
                groups.len()
            ));
            let all: Vec<f64> = records().map(|r| r.entropy).collect();
            batch_stats(&all, self.cfg.rho, floor)?
        } else {
            let entropies: Vec<f64> = kept_groups
                .iter()
                .flat_map(|g| g.sequences.iter().flatten().map(|r| r.entropy))
                .collect();
            let stats = batch_stats(&entropies, self.cfg.rho, floor)?;
            self.optimize(&kept_groups, &seq_refs, &entropies, &stats, lr, &mut diag_of, &mut metrics, &mut events)?;
            stats
        };

        metrics.entropy_quantile = stats.quantile;
        metrics.entropy_sigma = stats.sigma;
        metrics.h_max = stats.h_max;
        metrics.h_min = stats.h_min;
        self.state.carried = Some(stats.carryover());
        self.state.last_stats = Some(stats);
        self.state.step += 1;

        if evaluate {
            let e = self.evaluate(step)?;
            metrics.eval_greedy = Some(e.greedy);
            metrics.eval_sampled = Some(e.sampled);
        }
        metrics.events = events;

        if let Some(trace) = trace.as_deref_mut() {
            for (gi, g) in groups.iter().enumerate() {
                for (si, seq) in g.sequences.iter().enumerate() {
                    for (ti, r) in seq.iter().enumerate() {
                        let d = diag_of[gi][si][ti];
                        trace.push(TraceRecord {
                            step,
                            prompt_id: g.prompt_id(),
                            seq: si,
                            position: r.position,
                            token: r.token,
                            entropy: r.entropy,
                            temperature: r.temperature,
                            old_log_prob: r.old_log_prob,
                            reward: g.rewards[si],
                            ratio: d.map(|x| x.0.ratio),
                            h_tilde: d.map(|x| x.0.h_tilde),
                            advantage: d.map(|x| x.0.advantage),
                            clipped_left: d.is_some_and(|x| x.0.clipped_left),
                            clipped_right: d.is_some_and(|x| x.0.clipped_right),
                        });
                    }
                }
            }
        }
        Ok(metrics)
    }

    #[allow(clippy::too_many_arguments)]
    fn optimize(
        &mut self,
        kept_groups: &[&RolloutGroup],
        seq_refs: &[SeqRef],
        entropies: &[f64],
        stats: &EntropyStats,
        lr: f64,
        diag_of: &mut [Vec<Vec<Option<(TokenDiagnostics, f64)>>>],
        metrics: &mut StepMetrics,
        events: &mut Vec<String>,
    ) -> Result<()> {
        let advantages = self.advantages(kept_groups, stats)?;
        let mask = match &self.pipeline.forking {
            Some(f) => Some(forking_mask(entropies, f)?),
            None => None,
        };
        let settings = self.objective_settings();

        // Flatten in (group, sequence, position) order.
        let mut tokens = Vec::with_capacity(entropies.len());
        let mut lengths = Vec::with_capacity(seq_refs.len());
        let mut offsets = Vec::with_capacity(seq_refs.len() + 1);
        let mut cursor = 0;
        for g in kept_groups {
            for (si, seq) in g.sequences.iter().enumerate() {
                let response = g.response_tokens(si);
                offsets.push(cursor);
                for (t, r) in seq.iter().enumerate() {
                    tokens.push(TrainToken {
                        ctx: self.state.params.features(&g.prompt.prompt_tokens, &response[..t]),
                        token: r.token,
                        old_log_prob: r.old_log_prob,
                        entropy: r.entropy,
                        advantage: advantages[cursor + t],
                    });
                }
                cursor += seq.len();
                lengths.push(seq.len());
            }
        }
        offsets.push(cursor);

        let start_params = self.state.params.clone();
        let mut losses = Vec::new();
        let mut clip = ClipCounts::default();
        let mut adv = Vec::with_capacity(tokens.len());
        let mut critical = (0u64, 0.0f64);
        for chunk in partition(seq_refs.len(), self.cfg.mini_batches) {
            let tok_range = offsets[chunk.start]..offsets[chunk.end];
            let chunk_mask = mask.as_ref().map(|m| &m[tok_range.clone()]);
            if chunk_mask.is_some_and(|m| !m.iter().any(|&x| x)) {
                events.push(format!(
                    "mini-batch of sequences {}..{} has no forking tokens; skipped",
                    chunk.start, chunk.end
                ));
                continue;
            }
            let obj = minibatch_objective(
                &self.state.params,
                &tokens[tok_range.clone()],
                &lengths[chunk.clone()],
                chunk_mask,
                stats,
                &settings,
                true,
            )?;
            let grad = obj.gradient.as_ref().expect("gradient requested");
            if !obj.loss.is_finite() || !grad.is_finite() {
                self.state.params = start_params;
                events.push(format!(
                    "non-finite loss or gradient in mini-batch {}..{}; step rolled back",
                    chunk.start, chunk.end
                ));
                metrics.loss = None;
                return Ok(());
            }
            self.state.params.apply_update(grad, lr)?;
            losses.push(obj.loss);
            for (k, d) in obj.tokens.iter().enumerate() {
                let flat = tok_range.start + k;
                let seq_idx = offsets.partition_point(|&o| o <= flat) - 1;
                let sref = &seq_refs[seq_idx];
                let t = flat - offsets[seq_idx];
                diag_of[sref.group][sref.seq][t] = Some((*d, tokens[flat].entropy));
                if d.weight == 0.0 {
                    continue;
                }
                clip.record(d.h_tilde, d.clipped_left, d.clipped_right);
                adv.push(d.advantage);
                if d.h_tilde > 0.0 {
                    critical.0 += 1;
                    critical.1 += tokens[flat].entropy;
                }
            }
        }
        if !adv.is_empty() {
            metrics.adv_mean = Some(adv.iter().sum::<f64>() / adv.len() as f64);
            metrics.adv_max = Some(adv.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            metrics.adv_min = Some(adv.iter().copied().fold(f64::INFINITY, f64::min));
            metrics.clip = Some(clip);
            metrics.critical_tokens = Some(critical.0);
            metrics.critical_mean_entropy = (critical.0 > 0).then(|| critical.1 / critical.0 as f64);
        }
        if !losses.is_empty() {
            metrics.loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        Ok(())
    }
}

/// Supervised format pretraining on random well-formed responses.
fn warm_start(cfg: &TrainConfig, params: &mut PolicyParams) -> Result<()> {
    let ws = &cfg.warm_start;
    for s in 0..ws.steps {
        let mut grad = Gradient::zeros_like(params);
        let mut examples = Vec::with_capacity(ws.batch_size);
        for j in 0..ws.batch_size {
            let prompt = make_prompt(
                &cfg.tasks[j % cfg.tasks.len()],
                derive_seed(cfg.seed, DOMAIN_WARM, s as u64, j as u64) & !1,
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DOMAIN_WARM, s as u64, (j + ws.batch_size) as u64));
            let response = format_template(&prompt, &mut rng);
            examples.push((prompt, response));
        }
        let total: usize = examples.iter().map(|e| e.1.len()).sum();
        for (prompt, response) in &examples {
            for t in 0..response.len() {
                let ctx = params.features(&prompt.prompt_tokens, &response[..t]);
                let dist = params.distribution(&ctx, 1.0)?;
                grad.add_log_prob(&ctx, &dist, response[t], 1.0 / total as f64);
            }
        }
        params.apply_update(&grad, ws.learning_rate)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskSpec;

    fn tiny(algo: Algo) -> TrainConfig {
        TrainConfig {
            algo,
            batch_size: 8,
            steps: 3,
            eval_prompts: 4,
            eval_samples: 2,
            ..Default::default()
        }
    }

    #[test]
    fn partition_is_contiguous_and_balanced() {
        assert_eq!(partition(10, 4), vec![0..3, 3..6, 6..8, 8..10]);
        assert_eq!(partition(2, 4), vec![0..1, 1..2]);
        assert_eq!(partition(5, 1), vec![0..5]);
    }

    #[test]
    fn derived_seeds_split_domains() {
        assert_ne!(derive_seed(0, 1, 0, 0), derive_seed(0, 2, 0, 0));
        assert_ne!(derive_seed(0, 1, 0, 1), derive_seed(0, 1, 1, 0));
        assert_eq!(training_prompt_seed(3, 4, 5) & 1, 0);
        assert_eq!(eval_prompt_seed(3, 5) & 1, 1);
    }

    #[test]
    fn filter_drops_zero_variance_groups() {
        let cfg = tiny(Algo::Hapo);
        let params = PolicyParams::zeros(cfg.policy, 13).unwrap();
        let prompt = make_prompt(&TaskSpec::branching_sum(2, None), 2).unwrap();
        let mut g = crate::sampler::rollout_group(&params.snapshot(), &prompt, &cfg.sampler, None, 1).unwrap();
        g.rewards = vec![1, 0, 1, 1, 1, 1, 1, 1];
        let mut flat = g.clone();
        flat.rewards = vec![1; 8];
        let out = dynamic_sampling_filter(vec![g.clone(), flat.clone()]).unwrap();
        assert_eq!(out, vec![g.clone()]);
        assert_eq!(dynamic_sampling_filter(vec![g.clone()]).unwrap(), vec![g]);
        assert!(dynamic_sampling_filter(vec![flat]).unwrap().is_empty());
        assert!(dynamic_sampling_filter(vec![]).is_err());
    }

    #[test]
    fn bootstrap_sets_stats() {
        let t = Trainer::new(tiny(Algo::Hapo)).unwrap();
        let s = t.state().carried.unwrap();
        assert!(s.sigma > 0.0 && s.quantile.is_finite());
    }

    #[test]
    fn step_advances_and_carries_stats() {
        let mut t = Trainer::new(tiny(Algo::Hapo)).unwrap();
        let m = t.step(true, None).unwrap();
        assert_eq!(m.step, 0);
        assert_eq!(t.state().step, 1);
        let stats = t.state().last_stats.unwrap();
        assert_eq!(t.state().carried.unwrap(), stats.carryover());
        assert_eq!(m.entropy_quantile, stats.quantile);
        assert!(m.eval_greedy.is_some());
    }

    #[test]
    fn constant_reward_task_skips_without_update() {
        // Copy-parity of a single zero bit under a uniform policy essentially
        // never succeeds, so every group has all-zero rewards.
        let cfg = TrainConfig {
            tasks: vec![TaskSpec::copy_parity(&[0, 0, 0, 0, 0, 0, 0, 0])],
            warm_start: crate::config::WarmStart {
                steps: 0,
                ..Default::default()
            },
            ..tiny(Algo::Hapo)
        };
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.params().clone();
        let m = t.step(false, None).unwrap();
        assert!(m.skipped);
        assert_eq!(m.groups_kept, 0);
        assert!(m.loss.is_none() && m.adv_mean.is_none());
        assert!(!m.events.is_empty());
        assert_eq!(t.params(), &before);
    }

    #[test]
    fn first_minibatch_ratios_are_one() {
        let cfg = TrainConfig {
            mini_batches: 3,
            trace: true,
            ..tiny(Algo::Hapo)
        };
        let mut t = Trainer::new(cfg).unwrap();
        let mut trace = Vec::new();
        let m = t.step(false, Some(&mut trace)).unwrap();
        assert!(!m.skipped);
        let trained: Vec<_> = trace.iter().filter(|r| r.ratio.is_some()).collect();
        assert!(!trained.is_empty());
        // the first trained sequence belongs to the first mini-batch
        let first = trained[0];
        for r in trained.iter().filter(|r| r.prompt_id == first.prompt_id && r.seq == first.seq) {
            assert!((r.ratio.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_reward_tokens_gain_probability() {
        let cfg = TrainConfig {
            mini_batches: 1,
            learning_rate: 1e-3,
            warmup_steps: 0,
            ..tiny(Algo::Hapo)
        };
        let params = PolicyParams::zeros(cfg.policy, 13).unwrap();
        let prompt = make_prompt(&TaskSpec::branching_sum(2, None), 7).unwrap();
        let mut g = crate::sampler::rollout_group(&params.snapshot(), &prompt, &crate::sampler::SamplerParams::fixed(1.0, 2), None, 3).unwrap();
        g.rewards = vec![1, 0];
        let trainer = Trainer::new(cfg).unwrap();
        let stats = batch_stats(
            &g.sequences.iter().flatten().map(|r| r.entropy).collect::<Vec<_>>(),
            80.0,
            1e-6,
        )
        .unwrap();
        let adv = trainer.advantages(&[&g], &stats).unwrap();
        let mut tokens = Vec::new();
        for si in 0..2 {
            let resp = g.response_tokens(si);
            for (t, r) in g.sequences[si].iter().enumerate() {
                tokens.push(TrainToken {
                    ctx: params.features(&prompt.prompt_tokens, &resp[..t]),
                    token: r.token,
                    old_log_prob: r.old_log_prob,
                    entropy: r.entropy,
                    advantage: adv[tokens.len()],
                });
            }
        }
        let obj = minibatch_objective(&params, &tokens, &g.lengths(), None, &stats, &trainer.objective_settings(), true)
            .unwrap();
        let mut updated = params.clone();
        updated.apply_update(obj.gradient.as_ref().unwrap(), 1e-3).unwrap();
        let n0 = g.sequences[0].len();
        let seq_log_prob = |p: &PolicyParams| -> f64 {
            tokens[..n0]
                .iter()
                .map(|tok| p.distribution(&tok.ctx, 1.0).unwrap().log_probs[tok.token as usize])
                .sum()
        };
        assert!(seq_log_prob(&updated) > seq_log_prob(&params));
    }

    #[test]
    fn same_seed_same_metrics() {
        let run = || {
            let mut t = Trainer::new(tiny(Algo::Hapo)).unwrap();
            (0..2).map(|_| t.step(true, None).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
