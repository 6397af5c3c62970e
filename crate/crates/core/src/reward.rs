//! Branch rewards: binary task outcome plus a linear length penalty on
//! generated memories, and the token-overlap similarity used by the unified
//! single-stage ablation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::TaskOutcome;
use crate::error::{Error, Result};
use crate::policy::{Decision, MemoryOutput, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_len: f64,
    pub max_len: usize,
    /// Weight on the similarity reward; 0 disables it.
    pub similarity_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_len: 0.1,
            max_len: 8,
            similarity_weight: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_len >= 0.0) || !(self.similarity_weight >= 0.0) || self.max_len == 0 {
            return Err(Error::Domain(
                "lambda_len and similarity_weight must be >= 0 and max_len >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `|m|`: content tokens only. Decision and EOS tokens never count.
pub fn strip_for_count(output: &MemoryOutput) -> usize {
    match output.decision {
        Decision::Abstain => 0,
        Decision::Generate => output.content.len(),
    }
}

/// `R_m = −λ · |m| / L_max`.
pub fn length_penalty(m_len: usize, config: &RewardConfig) -> Result<f64> {
    if m_len > config.max_len {
        return Err(Error::Contract(format!(
            "memory length {m_len} exceeds budget {}",
            config.max_len
        )));
    }
    Ok(-config.lambda_len * m_len as f64 / config.max_len as f64)
}

/// Task reward, plus the length penalty for generate branches only.
pub fn branch_reward(outcome: &TaskOutcome, output: &MemoryOutput, config: &RewardConfig) -> Result<f64> {
    let task = f64::from(outcome.success);
    match output.decision {
        Decision::Abstain => Ok(task),
        Decision::Generate => Ok(task + length_penalty(strip_for_count(output), config)?),
    }
}

/// Multiset F1 between `m` and `reference`.
pub fn similarity_reward(m: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Domain("similarity reference is empty".into()));
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &t in m {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / m.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
