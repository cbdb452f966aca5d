//! Advantage estimators: sequence-level group normalization, token-level
//! group average, and differential advantage redistribution.

use serde::{Deserialize, Serialize};

use crate::error::{HapoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedistributionMode {
    Off,
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    PostNorm,
    PreNorm,
}

/// Pool of tokens the token-level mean and deviation are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageScope {
    Group,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RedistributionParams {
    pub mode: RedistributionMode,
    pub order: NormOrder,
    pub alpha_high: f64,
    pub alpha_low: f64,
}

impl Default for RedistributionParams {
    fn default() -> Self {
        RedistributionParams {
            mode: RedistributionMode::Continuous,
            order: NormOrder::PostNorm,
            alpha_high: 1.25,
            alpha_low: 0.75,
        }
    }
}

impl RedistributionParams {
    pub fn off() -> Self {
        RedistributionParams {
            mode: RedistributionMode::Off,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_high >= 1.0 && 1.0 >= self.alpha_low && self.alpha_low > 0.0) {
            return Err(HapoError::Config(format!(
                "redistribution needs alpha_high >= 1 >= alpha_low > 0 (got {}, {})",
                self.alpha_high, self.alpha_low
            )));
        }
        Ok(())
    }

    /// Entropy-only scaling `α(H)` used by pre-norm redistribution.
    pub fn entropy_scale(&self, h_tilde: f64) -> f64 {
        if h_tilde > 0.0 {
            self.alpha_high
        } else {
            self.alpha_low
        }
    }
}

/// Per-token advantages aligned to sequences laid out back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageView {
    /// Normalized advantages `A`.
    pub advantages: Vec<f64>,
    /// Advantages after redistribution `Â`.
    pub redistributed: Vec<f64>,
    pub lengths: Vec<usize>,
    pub mean_tok: f64,
    pub std_tok: f64,
}

impl AdvantageView {
    pub fn num_tokens(&self) -> usize {
        self.advantages.len()
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `A_i = (R_i − mean R) / std R` with the population deviation.
pub fn grpo_sequence_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(HapoError::Config(format!("group size must be >= 2, got {}", rewards.len())));
    }
    let (mean, std) = mean_std(rewards.iter().copied());
    if std == 0.0 {
        return Err(HapoError::Degenerate(format!("all {} rewards equal {}", rewards.len(), rewards[0])));
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Sequence-level advantages broadcast to every token.
pub fn sequence_advantage_view(rewards: &[f64], lengths: &[usize]) -> Result<AdvantageView> {
    check_layout(rewards, lengths)?;
    let per_seq = grpo_sequence_advantage(rewards)?;
    let advantages: Vec<f64> = per_seq
        .iter()
        .zip(lengths)
        .flat_map(|(&a, &n)| std::iter::repeat_n(a, n))
        .collect();
    let (mean_tok, std_tok) = mean_std(rewards.iter().copied());
    Ok(AdvantageView {
        redistributed: advantages.clone(),
        advantages,
        lengths: lengths.to_vec(),
        mean_tok,
        std_tok,
    })
}

fn check_layout(rewards: &[f64], lengths: &[usize]) -> Result<()> {
    if rewards.len() != lengths.len() {
        return Err(HapoError::Config("one reward per sequence required".into()));
    }
    if lengths.iter().any(|&n| n == 0) {
        return Err(HapoError::Config("every sequence must be nonempty".into()));
    }
    Ok(())
}

/// Standardizes raw token rewards `a_{i,t} = r_i` over every token of the unit.
pub fn token_level_group_advantage(rewards: &[f64], lengths: &[usize]) -> Result<AdvantageView> {
    check_layout(rewards, lengths)?;
    let raw: Vec<f64> = rewards
        .iter()
        .zip(lengths)
        .flat_map(|(&r, &n)| std::iter::repeat_n(r, n))
        .collect();
    standardize(raw, lengths)
}

fn standardize(raw: Vec<f64>, lengths: &[usize]) -> Result<AdvantageView> {
    let (mean_tok, std_tok) = mean_std(raw.iter().copied());
    if !(std_tok > 0.0) {
        return Err(HapoError::Degenerate(format!(
            "token rewards have zero variance over {} tokens",
            raw.len()
        )));
    }
    let advantages: Vec<f64> = raw.iter().map(|a| (a - mean_tok) / std_tok).collect();
    Ok(AdvantageView {
        redistributed: advantages.clone(),
        advantages,
        lengths: lengths.to_vec(),
        mean_tok,
        std_tok,
    })
}

/// Pre-norm redistribution: scale raw token rewards by `alpha` and then
/// standardize the scaled values.
pub fn redistribute_pre_norm(rewards: &[f64], lengths: &[usize], alpha: &[f64]) -> Result<AdvantageView> {
    check_layout(rewards, lengths)?;
    let total: usize = lengths.iter().sum();
    if alpha.len() != total {
        return Err(HapoError::Config(format!("need {total} scaling factors, got {}", alpha.len())));
    }
    let scaled: Vec<f64> = rewards
        .iter()
        .zip(lengths)
        .flat_map(|(&r, &n)| std::iter::repeat_n(r, n))
        .zip(alpha)
        .map(|(a, s)| a * s)
        .collect();
    standardize(scaled, lengths)
}

/// Ratio interval `[1 − ε_L/2, 1 + ε_R/2]` treated as "no clear update direction".
pub fn neutral_zone(eps_low: f64, eps_high: f64) -> (f64, f64) {
    (1.0 - eps_low / 2.0, 1.0 + eps_high / 2.0)
}

/// Redistribution factor `λ` for a single token.
pub fn redistribution_factor(h_tilde: f64, ratio: f64, zone: (f64, f64), p: &RedistributionParams) -> f64 {
    let inside = zone.0 <= ratio && ratio <= zone.1;
    let high = h_tilde > 0.0;
    match p.mode {
        RedistributionMode::Off => 1.0,
        RedistributionMode::Continuous => {
            if (high && !inside) || (!high && inside) {
                1.0 + h_tilde
            } else {
                1.0
            }
        }
        RedistributionMode::Binary => match (high, inside) {
            (true, false) => p.alpha_high,
            (false, true) => p.alpha_low,
            _ => 1.0,
        },
    }
}

/// Post-norm redistribution of a token slice. `bounds[t] = (ε_L, ε_R)`.
pub fn redistribute_tokens(
    advantages: &[f64],
    h_tilde: &[f64],
    ratios: &[f64],
    bounds: &[(f64, f64)],
    p: &RedistributionParams,
) -> Result<Vec<f64>> {
    let n = advantages.len();
    if h_tilde.len() != n || ratios.len() != n || bounds.len() != n {
        return Err(HapoError::Config("redistribution inputs must align token by token".into()));
    }
    if p.mode == RedistributionMode::Off {
        return Ok(advantages.to_vec());
    }
    Ok((0..n)
        .map(|t| {
            let zone = neutral_zone(bounds[t].0, bounds[t].1);
            advantages[t] * redistribution_factor(h_tilde[t], ratios[t], zone, p)
        })
        .collect())
}

/// Fills `view.redistributed` from `view.advantages`.
pub fn redistribute(
    view: &AdvantageView,
    h_tilde: &[f64],
    ratios: &[f64],
    bounds: &[(f64, f64)],
    p: &RedistributionParams,
) -> Result<AdvantageView> {
    let redistributed = redistribute_tokens(&view.advantages, h_tilde, ratios, bounds, p)?;
    Ok(AdvantageView {
        redistributed,
        ..view.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(grpo_sequence_advantage(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(
            grpo_sequence_advantage(&[1.0; 4]),
            Err(HapoError::Degenerate(_))
        ));
        let a = grpo_sequence_advantage(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = [1.732, -0.577, -0.577, -0.577];
        for (x, y) in a.iter().zip(expected) {
            assert!(close(*x, y, 1e-3));
        }
    }

    #[test]
    fn token_level_unequal_lengths() {
        let v = token_level_group_advantage(&[1.0, 0.0], &[2, 3]).unwrap();
        assert!(close(v.mean_tok, 0.4, 1e-15));
        assert!(close(v.std_tok, 0.24f64.sqrt(), 1e-15));
        let pos = 0.6 / 0.24f64.sqrt();
        let neg = -0.4 / 0.24f64.sqrt();
        assert!(close(pos, 1.2247, 1e-4) && close(neg, -0.8165, 1e-4));
        for t in 0..2 {
            assert!(close(v.advantages[t], pos, 1e-12));
        }
        for t in 2..5 {
            assert!(close(v.advantages[t], neg, 1e-12));
        }
    }

    #[test]
    fn token_level_equal_lengths_is_balanced() {
        let v = token_level_group_advantage(&[1.0, 0.0], &[4, 4]).unwrap();
        assert!(v.advantages[..4].iter().all(|a| close(*a, 1.0, 1e-15)));
        assert!(v.advantages[4..].iter().all(|a| close(*a, -1.0, 1e-15)));
        assert!(token_level_group_advantage(&[0.0, 0.0], &[4, 2]).is_err());
    }

    #[test]
    fn continuous_redistribution_examples() {
        let p = RedistributionParams::default();
        let zone = neutral_zone(0.2, 0.28);
        assert!(close(zone.0, 0.9, 1e-15) && close(zone.1, 1.14, 1e-15));
        assert_eq!(redistribution_factor(0.5, 1.5, zone, &p), 1.5);
        assert_eq!(redistribution_factor(0.5, 1.0, zone, &p), 1.0);
        assert_eq!(redistribution_factor(-1.0, 1.0, zone, &p), 0.0);
        assert_eq!(redistribution_factor(-0.5, 1.3, zone, &p), 1.0);
    }

    #[test]
    fn binary_redistribution() {
        let p = RedistributionParams {
            mode: RedistributionMode::Binary,
            ..Default::default()
        };
        let zone = neutral_zone(0.2, 0.28);
        assert_eq!(redistribution_factor(0.3, 1.2, zone, &p), 1.25);
        assert_eq!(redistribution_factor(0.3, 1.0, zone, &p), 1.0);
        assert_eq!(redistribution_factor(-0.3, 1.0, zone, &p), 0.75);
        assert_eq!(redistribution_factor(-0.3, 0.7, zone, &p), 1.0);
    }

    #[test]
    fn off_mode_is_identity() {
        let v = token_level_group_advantage(&[1.0, 0.0, 1.0], &[3, 1, 2]).unwrap();
        let n = v.num_tokens();
        let out = redistribute(&v, &vec![-0.7; n], &vec![1.0; n], &vec![(0.2, 0.28); n], &RedistributionParams::off())
            .unwrap();
        assert_eq!(out.redistributed, v.advantages);
        // post-norm leaves the normalization statistics alone
        assert_eq!((out.mean_tok, out.std_tok), (v.mean_tok, v.std_tok));
    }

    #[test]
    fn pre_norm_examples() {
        let rewards = [1.0, 0.0];
        let lengths = [2, 2];
        let base = token_level_group_advantage(&rewards, &lengths).unwrap();
        let ident = redistribute_pre_norm(&rewards, &lengths, &[1.0; 4]).unwrap();
        assert_eq!(ident.advantages, base.advantages);

        let v = redistribute_pre_norm(&rewards, &lengths, &[1.25, 0.75, 1.0, 1.0]).unwrap();
        // scaled = (1.25, 0.75, 0, 0): mean 0.5, var (0.5625 + 0.0625 + 0.25 + 0.25) / 4
        let mean = 0.5;
        let std = ((0.5625f64 + 0.0625 + 0.25 + 0.25) / 4.0).sqrt();
        assert!(close(v.mean_tok, mean, 1e-15) && close(v.std_tok, std, 1e-15));
        assert!(close(v.advantages[0], 0.75 / std, 1e-12));
        assert!(close(v.advantages[1], 0.25 / std, 1e-12));
        assert!(close(v.advantages[2], -0.5 / std, 1e-12));
        assert_ne!(v.std_tok, base.std_tok);

        let c = redistribute_pre_norm(&[1.0, 0.0, 1.0], &[2, 3, 1], &[2.5; 6]).unwrap();
        let b = token_level_group_advantage(&[1.0, 0.0, 1.0], &[2, 3, 1]).unwrap();
        for (x, y) in c.advantages.iter().zip(&b.advantages) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    proptest! {
        #[test]
        fn token_level_zero_sum(
            seqs in prop::collection::vec((0u8..2, 1usize..64), 2..16)
        ) {
            let rewards: Vec<f64> = seqs.iter().map(|s| s.0 as f64).collect();
            prop_assume!(rewards.iter().any(|&r| r == 1.0) && rewards.iter().any(|&r| r == 0.0));
            let lengths: Vec<usize> = seqs.iter().map(|s| s.1).collect();
            let v = token_level_group_advantage(&rewards, &lengths).unwrap();
            let sum: f64 = v.advantages.iter().sum();
            prop_assert!(sum.abs() <= 1e-9 * v.num_tokens() as f64);
            let mut distinct = v.advantages.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assert_eq!(distinct.len(), 2);
        }

        #[test]
        fn redistribution_preserves_sign(
            a in -5.0f64..5.0, h in -1.0f64..=1.0, r in 0.01f64..3.0, binary in any::<bool>()
        ) {
            let p = RedistributionParams {
                mode: if binary { RedistributionMode::Binary } else { RedistributionMode::Continuous },
                ..Default::default()
            };
            let out = a * redistribution_factor(h, r, neutral_zone(0.2, 0.28), &p);
            prop_assert!(out == 0.0 || out.signum() == a.signum());
        }
    }
}
