//! Synthetic autoregressive tasks with verifiable binary rewards.
//!
//! Token layout shared by every task:
//!
//! | id      | meaning                       |
//! |---------|-------------------------------|
//! | 0       | end of sequence (`EOS`)       |
//! | 1       | connector                     |
//! | 2       | prompt separator              |
//! | 3..=12  | digits 0..=9                  |
//! | 13..    | unused filler tokens          |
//!
//! `branching-sum` asks for `L` digits separated by connectors whose sum is
//! `V (mod 10)`: `d C d C ... d C EOS`. Every digit but the last is a free
//! choice, so rollouts interleave branching positions with forced ones.
//! `copy-parity` asks the policy to repeat the prompt bits, append their
//! parity and stop; its answer is unique.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HapoError, Result};

pub type TokenId = u32;

pub const EOS: TokenId = 0;
pub const CONNECTOR: TokenId = 1;
pub const SEPARATOR: TokenId = 2;
pub const DIGIT_BASE: TokenId = 3;

/// Largest search space `enumerate_winning` accepts.
pub const MAX_ENUMERATION: u128 = 10_000_000;

pub fn digit_token(d: u8) -> TokenId {
    DIGIT_BASE + d as TokenId
}

pub fn token_digit(t: TokenId) -> Option<u8> {
    (DIGIT_BASE..DIGIT_BASE + 10)
        .contains(&t)
        .then(|| (t - DIGIT_BASE) as u8)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    BranchingSum {
        vocab_size: usize,
        max_len: usize,
        /// Number of digit positions `L`.
        choices: usize,
        /// Target residue `V`; drawn per prompt when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<u8>,
    },
    CopyParity {
        vocab_size: usize,
        max_len: usize,
        n_bits: usize,
        /// Fixed bit string; drawn per prompt when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bits: Option<Vec<u8>>,
    },
}

impl TaskSpec {
    pub fn branching_sum(choices: usize, target: Option<u8>) -> Self {
        TaskSpec::BranchingSum {
            vocab_size: 13,
            max_len: 2 * choices + 1,
            choices,
            target,
        }
    }

    pub fn copy_parity(bits: &[u8]) -> Self {
        TaskSpec::CopyParity {
            vocab_size: 5,
            max_len: bits.len() + 2,
            n_bits: bits.len(),
            bits: Some(bits.to_vec()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            TaskSpec::BranchingSum { vocab_size, .. } | TaskSpec::CopyParity { vocab_size, .. } => {
                *vocab_size
            }
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            TaskSpec::BranchingSum { max_len, .. } | TaskSpec::CopyParity { max_len, .. } => *max_len,
        }
    }

    /// Length (including `EOS`) of every reward-1 response.
    pub fn answer_len(&self) -> usize {
        match self {
            TaskSpec::BranchingSum { choices, .. } => 2 * choices + 1,
            TaskSpec::CopyParity { n_bits, .. } => n_bits + 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(HapoError::Config(m));
        if self.vocab_size() < 4 {
            return cfg(format!("vocab_size must be >= 4, got {}", self.vocab_size()));
        }
        if self.max_len() < 2 {
            return cfg(format!("max_len must be >= 2, got {}", self.max_len()));
        }
        match self {
            TaskSpec::BranchingSum {
                vocab_size,
                choices,
                target,
                ..
            } => {
                if *vocab_size < (DIGIT_BASE + 10) as usize {
                    return cfg(format!("branching_sum needs vocab_size >= 13, got {vocab_size}"));
                }
                if !(1..=9).contains(choices) {
                    return cfg(format!("branching_sum choices must be in 1..=9, got {choices}"));
                }
                if let Some(v) = target {
                    if *v > 9 {
                        return cfg(format!("branching_sum target must be a residue 0..=9, got {v}"));
                    }
                }
            }
            TaskSpec::CopyParity {
                vocab_size,
                n_bits,
                bits,
                ..
            } => {
                if *vocab_size < (DIGIT_BASE + 2) as usize {
                    return cfg(format!("copy_parity needs vocab_size >= 5, got {vocab_size}"));
                }
                if *n_bits == 0 {
                    return cfg("copy_parity n_bits must be >= 1".into());
                }
                if let Some(b) = bits {
                    if b.len() != *n_bits {
                        return cfg(format!("copy_parity bits has length {}, expected n_bits = {n_bits}", b.len()));
                    }
                    if b.iter().any(|&x| x > 1) {
                        return cfg("copy_parity bits must be 0 or 1".into());
                    }
                }
            }
        }
        if self.max_len() < self.answer_len() {
            return cfg(format!(
                "max_len {} is shorter than the answer length {}; no response can score 1",
                self.max_len(),
                self.answer_len()
            ));
        }
        Ok(())
    }
}

/// A task instance with every random parameter resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub task: TaskSpec,
    pub prompt_tokens: Vec<TokenId>,
    pub prompt_id: u64,
}

/// Builds a prompt; random task parameters are drawn from `seed`.
pub fn make_prompt(spec: &TaskSpec, seed: u64) -> Result<Prompt> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (task, prompt_tokens) = match spec {
        TaskSpec::BranchingSum {
            vocab_size,
            max_len,
            choices,
            target,
        } => {
            let v = target.unwrap_or_else(|| rng.random_range(0..10u8));
            let tokens = vec![SEPARATOR, digit_token(*choices as u8), digit_token(v)];
            let task = TaskSpec::BranchingSum {
                vocab_size: *vocab_size,
                max_len: *max_len,
                choices: *choices,
                target: Some(v),
            };
            (task, tokens)
        }
        TaskSpec::CopyParity {
            vocab_size,
            max_len,
            n_bits,
            bits,
        } => {
            let bits = bits
                .clone()
                .unwrap_or_else(|| (0..*n_bits).map(|_| rng.random_range(0..2u8)).collect());
            let mut tokens = Vec::with_capacity(bits.len() + 2);
            tokens.push(SEPARATOR);
            tokens.extend(bits.iter().map(|&b| digit_token(b)));
            tokens.push(SEPARATOR);
            let task = TaskSpec::CopyParity {
                vocab_size: *vocab_size,
                max_len: *max_len,
                n_bits: *n_bits,
                bits: Some(bits),
            };
            (task, tokens)
        }
    };
    Ok(Prompt {
        task,
        prompt_tokens,
        prompt_id: seed,
    })
}

/// Binary verifiable reward. Malformed, truncated or overlong responses score 0.
pub fn score(prompt: &Prompt, response: &[TokenId]) -> u8 {
    let task = &prompt.task;
    if response.len() > task.max_len() || response.len() != task.answer_len() {
        return 0;
    }
    if response.iter().any(|&t| t as usize >= task.vocab_size()) {
        return 0;
    }
    if response.last() != Some(&EOS) {
        return 0;
    }
    let body = &response[..response.len() - 1];
    match task {
        TaskSpec::BranchingSum {
            target: Some(v), ..
        } => {
            let mut sum = 0u32;
            for (pos, &tok) in body.iter().enumerate() {
                if pos % 2 == 1 {
                    if tok != CONNECTOR {
                        return 0;
                    }
                } else {
                    match token_digit(tok) {
                        Some(d) => sum += d as u32,
                        None => return 0,
                    }
                }
            }
            u8::from(sum % 10 == *v as u32)
        }
        TaskSpec::CopyParity { bits: Some(bits), .. } => {
            let parity = bits.iter().fold(0u8, |acc, b| acc ^ b);
            let expected = bits.iter().chain(std::iter::once(&parity));
            u8::from(body.iter().zip(expected).all(|(&t, &b)| t == digit_token(b)))
        }
        // Unresolved specs only come from hand-built prompts.
        _ => 0,
    }
}

/// Exhaustively counts reward-1 responses among well-formatted candidates.
///
/// For `branching-sum` the candidates are all `10^L` digit assignments; for
/// `copy-parity` all `2^(n+1)` bit strings (copied bits plus parity bit).
pub fn enumerate_winning(spec: &TaskSpec) -> Result<u64> {
    spec.validate()?;
    let prompt = match spec {
        TaskSpec::BranchingSum { target: None, .. } | TaskSpec::CopyParity { bits: None, .. } => {
            return Err(HapoError::Config(
                "enumerate_winning needs a fully specified task (target / bits)".into(),
            ))
        }
        _ => make_prompt(spec, 0)?,
    };
    let (alphabet, slots, separated) = match spec {
        TaskSpec::BranchingSum { choices, .. } => (10u128, *choices, true),
        TaskSpec::CopyParity { n_bits, .. } => (2u128, n_bits + 1, false),
    };
    let space = alphabet
        .checked_pow(slots as u32)
        .unwrap_or(u128::MAX);
    if space > MAX_ENUMERATION {
        return Err(HapoError::SearchSpace(space));
    }
    let mut count = 0u64;
    let mut response = Vec::with_capacity(2 * slots + 1);
    for code in 0..space {
        response.clear();
        let mut rest = code;
        for _ in 0..slots {
            response.push(digit_token((rest % alphabet) as u8));
            if separated {
                response.push(CONNECTOR);
            }
            rest /= alphabet;
        }
        response.push(EOS);
        count += score(&prompt, &response) as u64;
    }
    Ok(count)
}

/// A random well-formatted (not necessarily correct) response, used to give
/// the policy a format prior before reinforcement learning.
pub fn format_template<R: Rng + ?Sized>(prompt: &Prompt, rng: &mut R) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(prompt.task.answer_len());
    match &prompt.task {
        TaskSpec::BranchingSum { choices, .. } => {
            for _ in 0..*choices {
                out.push(digit_token(rng.random_range(0..10u8)));
                out.push(CONNECTOR);
            }
        }
        TaskSpec::CopyParity { n_bits, .. } => {
            for _ in 0..=*n_bits {
                out.push(digit_token(rng.random_range(0..2u8)));
            }
        }
    }
    out.push(EOS);
    out
}
