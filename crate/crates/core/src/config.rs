//! Run configuration: the TOML file form of a training run.
//!
//! Unknown keys are rejected at every level. `--set key=value` overrides are
//! applied to the parsed TOML tree before deserialization, so an override
//! naming a nonexistent key fails the same way a typo in the file does.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageScope, NormOrder, RedistributionMode, RedistributionParams};
use crate::env::TaskSpec;
use crate::error::{HapoError, Result};
use crate::loss::{Algo, ClipBounds, ClipMode, ForkingMaskParams};
use crate::policy::FeatureSpec;
use crate::sampler::{SamplerParams, TemperatureMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Supervised format pretraining applied before reinforcement learning,
/// standing in for a pretrained base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStart {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        WarmStart {
            steps: 60,
            batch_size: 32,
            learning_rate: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub algo: Algo,
    /// Active HAPO components when `algo = "hapo"`: any subset of
    /// `A` (adaptive temperature), `B` (token-level group advantage),
    /// `C` (advantage redistribution), `D` (adaptive clipping).
    pub hapo_components: String,
    pub seed: u64,
    pub steps: usize,
    /// Prompts per step.
    pub batch_size: usize,
    /// Number of sequential updates per step; sequences are split into
    /// this many contiguous chunks.
    pub mini_batches: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Entropy percentile ρ for the batch statistics.
    pub rho: f64,
    pub advantage_scope: AdvantageScope,
    /// Force `h̃ ≡ 0` during optimization (degenerate-equivalence checks).
    pub freeze_scaled_entropy: bool,
    pub eval_every: usize,
    pub eval_prompts: usize,
    pub eval_samples: usize,
    pub eval_temperature: f64,
    pub checkpoint_every: usize,
    /// Write a per-token `trace.jsonl` next to the metrics.
    pub trace: bool,
    pub sampler: SamplerParams,
    pub redistribution: RedistributionParams,
    pub clip: ClipBounds,
    pub forking: ForkingMaskParams,
    pub policy: FeatureSpec,
    pub warm_start: WarmStart,
    pub tasks: Vec<TaskSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            algo: Algo::Hapo,
            hapo_components: "ABCD".into(),
            seed: 0,
            steps: 200,
            batch_size: 32,
            mini_batches: 4,
            learning_rate: 1.0,
            warmup_steps: 10,
            rho: 80.0,
            advantage_scope: AdvantageScope::Group,
            freeze_scaled_entropy: false,
            eval_every: 10,
            eval_prompts: 32,
            eval_samples: 8,
            eval_temperature: 0.5,
            checkpoint_every: 50,
            trace: false,
            sampler: SamplerParams::default(),
            redistribution: RedistributionParams::default(),
            clip: ClipBounds::default(),
            forking: ForkingMaskParams::default(),
            policy: FeatureSpec::default(),
            warm_start: WarmStart::default(),
            tasks: vec![TaskSpec::branching_sum(2, None)],
        }
    }
}

/// Which HAPO components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Components {
    pub adaptive_temperature: bool,
    pub token_level_advantage: bool,
    pub redistribution: bool,
    pub adaptive_clipping: bool,
}

impl Components {
    pub fn all() -> Self {
        Components {
            adaptive_temperature: true,
            token_level_advantage: true,
            redistribution: true,
            adaptive_clipping: true,
        }
    }

    pub fn parse(flags: &str) -> Result<Self> {
        let mut c = Components::default();
        for ch in flags.chars() {
            match ch.to_ascii_uppercase() {
                'A' => c.adaptive_temperature = true,
                'B' => c.token_level_advantage = true,
                'C' => c.redistribution = true,
                'D' => c.adaptive_clipping = true,
                other => {
                    return Err(HapoError::Config(format!(
                        "invalid component flag `{other}` (expected letters from A, B, C, D)"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, ch) in [
            (self.adaptive_temperature, 'A'),
            (self.token_level_advantage, 'B'),
            (self.redistribution, 'C'),
            (self.adaptive_clipping, 'D'),
        ] {
            if on {
                s.push(ch);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageKind {
    Sequence,
    TokenLevel,
}

/// A config resolved into the concrete choices each pipeline stage makes.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub sampler: SamplerParams,
    pub advantage: AdvantageKind,
    pub redistribution: RedistributionParams,
    pub clip: ClipBounds,
    /// Normalization used by `loss_weights`.
    pub loss_algo: Algo,
    pub forking: Option<ForkingMaskParams>,
}

impl TrainConfig {
    pub fn components(&self) -> Result<Components> {
        Components::parse(&self.hapo_components)
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let fixed_sampler = SamplerParams {
            mode: TemperatureMode::Fixed,
            ..self.sampler.clone()
        };
        let clip_higher = ClipBounds::uniform(self.clip.eps_low, self.clip.eps_high);
        let dapo = Pipeline {
            sampler: fixed_sampler.clone(),
            advantage: AdvantageKind::Sequence,
            redistribution: RedistributionParams {
                mode: RedistributionMode::Off,
                ..self.redistribution.clone()
            },
            clip: clip_higher.clone(),
            loss_algo: Algo::Dapo,
            forking: None,
        };
        Ok(match self.algo {
            Algo::Grpo => Pipeline {
                clip: ClipBounds::uniform(self.clip.eps_low, self.clip.eps_low),
                loss_algo: Algo::Grpo,
                ..dapo
            },
            Algo::Dapo => dapo,
            Algo::DapoFork if self.forking.enabled => Pipeline {
                loss_algo: Algo::DapoFork,
                forking: Some(self.forking.clone()),
                ..dapo
            },
            Algo::DapoFork => dapo,
            Algo::Hapo => {
                let c = self.components()?;
                Pipeline {
                    sampler: if c.adaptive_temperature {
                        self.sampler.clone()
                    } else {
                        fixed_sampler
                    },
                    advantage: if c.token_level_advantage {
                        AdvantageKind::TokenLevel
                    } else {
                        AdvantageKind::Sequence
                    },
                    redistribution: if c.redistribution {
                        self.redistribution.clone()
                    } else {
                        dapo.redistribution.clone()
                    },
                    clip: if c.adaptive_clipping {
                        self.clip.clone()
                    } else {
                        clip_higher
                    },
                    loss_algo: Algo::Hapo,
                    forking: None,
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(HapoError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return cfg(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.batch_size == 0 || self.mini_batches == 0 {
            return cfg("batch_size and mini_batches must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..=100.0).contains(&self.rho) {
            return cfg(format!("rho must be in [0, 100], got {}", self.rho));
        }
        if self.eval_every == 0 || self.eval_prompts == 0 || self.eval_samples == 0 || !(self.eval_temperature > 0.0) {
            return cfg("evaluation settings must be positive".into());
        }
        if self.tasks.is_empty() {
            return cfg("at least one task is required".into());
        }
        let vocab = self.tasks[0].vocab_size();
        for t in &self.tasks {
            t.validate()?;
            if t.vocab_size() != vocab {
                return cfg("all tasks must share one vocab_size".into());
            }
        }
        self.sampler.validate()?;
        self.redistribution.validate()?;
        self.clip.validate()?;
        self.forking.validate()?;
        self.policy.validate()?;
        let p = self.pipeline()?;
        if p.redistribution.mode != RedistributionMode::Off
            && p.redistribution.order == NormOrder::PreNorm
            && p.advantage != AdvantageKind::TokenLevel
        {
            return cfg("pre_norm redistribution requires token-level advantages (component B)".into());
        }
        if self.clip.mode == ClipMode::Uniform && p.loss_algo == Algo::Hapo && self.components()?.adaptive_clipping {
            log::info!("adaptive clipping requested with clip.mode = uniform; bounds stay constant");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tasks[0].vocab_size()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HapoError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HapoError::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HapoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| HapoError::Config(format!("override `{s}` is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(HapoError::Config(format!("override `{s}` has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key in a TOML tree, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HapoError::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Loads a config file (or the defaults when `path` is `None`) and applies
/// `key=value` overrides in order.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HapoError::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| HapoError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    TrainConfig::from_table(table)
}
