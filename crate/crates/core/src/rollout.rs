//! Rollout groups: structured counterfactual groups (one forced abstain
//! branch plus `G−1` generate branches) or plain i.i.d. groups.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{Agent, Context};
use crate::error::{Error, Result};
use crate::policy::{Decision, MemoryOutput, PolicyParameters, SamplingParams, TokenId};
use crate::reward::{branch_reward, similarity_reward, RewardConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    ForcedAbstain,
    SampledGenerate,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Structured,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBranch {
    pub output: MemoryOutput,
    /// Per-token log-probs under the rollout policy.
    pub sampler_log_probs: Vec<f64>,
    pub reward: Option<f64>,
    pub branch_kind: BranchKind,
}

impl RolloutBranch {
    pub fn reward(&self) -> Result<f64> {
        self.reward
            .ok_or_else(|| Error::Contract("branch reward has not been evaluated".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub context: Context,
    pub branches: Vec<RolloutBranch>,
    pub mode: RolloutMode,
    /// Seed the branch streams and agent calls were keyed by.
    pub seed: u64,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.branches.len()
    }

    pub fn rewards(&self) -> Result<Vec<f64>> {
        self.branches.iter().map(RolloutBranch::reward).collect()
    }

    pub fn abstain_count(&self) -> usize {
        self.branches
            .iter()
            .filter(|b| b.output.decision == Decision::Abstain)
            .count()
    }
}

fn branch_rng(seed: u64, branch: usize) -> rng::StreamRng {
    rng::stream(seed, &[rng::hash_str("branch"), branch as u64])
}

/// Branch 0 is `[ABSTAIN]`; branches `1..G` force `[GENERATE]` and sample
/// content freely. Forced decisions keep their true log-prob under `policy_old`.
pub fn structured_rollout(
    policy_old: &PolicyParameters,
    context: &Context,
    group_size: usize,
    params: &SamplingParams,
    seed: u64,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::Domain(format!(
            "structured rollout needs G >= 2, got {group_size}"
        )));
    }
    let branches = (0..group_size)
        .map(|j| {
            let (forced, kind) = if j == 0 {
                (Decision::Abstain, BranchKind::ForcedAbstain)
            } else {
                (Decision::Generate, BranchKind::SampledGenerate)
            };
            let s = policy_old.sample_output_with(
                &context.features,
                params,
                Some(forced),
                &mut branch_rng(seed, j),
            )?;
            Ok(RolloutBranch {
                output: s.output,
                sampler_log_probs: s.log_probs,
                reward: None,
                branch_kind: kind,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        context: context.clone(),
        branches,
        mode: RolloutMode::Structured,
        seed,
    })
}

/// `G` branches with freely sampled decisions, as in vanilla GRPO.
pub fn iid_rollout(
    policy_old: &PolicyParameters,
    context: &Context,
    group_size: usize,
    params: &SamplingParams,
    seed: u64,
) -> Result<RolloutGroup> {
    if group_size == 0 {
        return Err(Error::Domain("group size must be at least 1".into()));
    }
    let branches = (0..group_size)
        .map(|j| {
            let s = policy_old.sample_output(&context.features, params, &mut branch_rng(seed, j))?;
            Ok(RolloutBranch {
                output: s.output,
                sampler_log_probs: s.log_probs,
                reward: None,
                branch_kind: BranchKind::Iid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        context: context.clone(),
        branches,
        mode: RolloutMode::Iid,
        seed,
    })
}

pub fn rollout(
    mode: RolloutMode,
    policy_old: &PolicyParameters,
    context: &Context,
    group_size: usize,
    params: &SamplingParams,
    seed: u64,
) -> Result<RolloutGroup> {
    match mode {
        RolloutMode::Structured => structured_rollout(policy_old, context, group_size, params, seed),
        RolloutMode::Iid => iid_rollout(policy_old, context, group_size, params, seed),
    }
}

/// How branch rewards are computed.
#[derive(Debug, Clone, Copy)]
pub struct RewardSpec<'a> {
    pub config: &'a RewardConfig,
    /// Reference hint for the similarity term; only used when
    /// `config.similarity_weight > 0`.
    pub similarity_reference: Option<&'a [TokenId]>,
    /// Agent episodes averaged for the abstain branch (stochastic agents).
    pub abstain_repeats: usize,
}

/// Fills every branch's reward. Abstain branches hand the agent no memory.
pub fn evaluate_group(group: &mut RolloutGroup, agent: &dyn Agent, spec: &RewardSpec<'_>) -> Result<()> {
    if group.branches.iter().any(|b| b.reward.is_some()) {
        return Err(Error::Contract("group rewards are already filled".into()));
    }
    let seed = group.seed;
    let context = &group.context;
    for (j, branch) in group.branches.iter_mut().enumerate() {
        let ordinal = |k: usize| rng::derive_seed(seed, &[j as u64, k as u64]);
        let reward = (|| -> Result<f64> {
            let memory = branch.output.memory();
            if memory.is_none() && spec.abstain_repeats > 1 {
                let mut total = 0.0;
                for k in 0..spec.abstain_repeats {
                    total += f64::from(agent.run(context, None, ordinal(k))?.success);
                }
                return Ok(total / spec.abstain_repeats as f64);
            }
            let outcome = agent.run(context, memory, ordinal(0))?;
            let mut r = branch_reward(&outcome, &branch.output, spec.config)?;
            if let (Some(m), Some(reference)) = (memory, spec.similarity_reference) {
                if spec.config.similarity_weight > 0.0 {
                    r += spec.config.similarity_weight * similarity_reward(m, reference)?;
                }
            }
            Ok(r)
        })()
        .map_err(|e| e.at_branch(j))?;
        branch.reward = Some(reward);
    }
    Ok(())
}

#[derive(Serialize)]
struct DumpLine<'a> {
    context_id: &'a str,
    branch: usize,
    decision: Decision,
    content: &'a [TokenId],
    log_probs: &'a [f64],
    reward: Option<f64>,
}

/// Debug dump: one JSON line per branch.
pub fn dump_groups(groups: &[RolloutGroup], mut out: impl Write) -> Result<()> {
    for g in groups {
        for (j, b) in g.branches.iter().enumerate() {
            let line = DumpLine {
                context_id: &g.context.context_id,
                branch: j,
                decision: b.output.decision,
                content: &b.output.content,
                log_probs: &b.sampler_log_probs,
                reward: b.reward,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}
