//! Advantage estimation.
//!
//! The decoupled estimator splits a structured group's learning signal in
//! two. The decision token gets `±Δ` where `Δ = V_abs − V_gen` compares the
//! abstain branch with the mean generate branch. Content tokens get the
//! group-normalized reward within the generate branches, and only when
//! generating beats abstaining (`Δ < 0`). The vanilla estimator broadcasts
//! one normalized scalar per branch to every token.
//!
//! Estimators implement [`AdvantageEstimator`] and are looked up by name in
//! an [`EstimatorRegistry`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{RolloutGroup, RolloutMode};

/// Length of the decision prefix.
pub const DECISION_PREFIX_LEN: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchValues {
    pub v_abs: f64,
    pub v_gen: f64,
    pub delta: f64,
    pub gen_rewards: Vec<f64>,
    /// Population standard deviation of `gen_rewards`.
    pub gen_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTensor {
    pub decision: Vec<f64>,
    pub content: Vec<f64>,
    /// One row per branch, aligned with the branch's serialized tokens.
    pub per_token: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Content positions get `1[Δ<0]·A_c`.
    Gated,
    /// Content positions get `A_d + A_c`.
    NaiveSum,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn branch_values(group: &RolloutGroup) -> Result<BranchValues> {
    if group.mode != RolloutMode::Structured {
        return Err(Error::Contract(
            "branch values need a structured group; use the vanilla estimator".into(),
        ));
    }
    let rewards = group.rewards()?;
    let v_abs = rewards[0];
    let gen_rewards = rewards[1..].to_vec();
    let v_gen = mean(&gen_rewards);
    let gen_std = population_std(&gen_rewards, v_gen);
    Ok(BranchValues {
        v_abs,
        v_gen,
        delta: v_abs - v_gen,
        gen_rewards,
        gen_std,
    })
}

/// `A_d = [+Δ, −Δ, …, −Δ]`.
pub fn decision_advantages(values: &BranchValues, group_size: usize) -> Vec<f64> {
    (0..group_size)
        .map(|j| if j == 0 { values.delta } else { -values.delta })
        .collect()
}

/// `A_c = [0, (r_j − V_gen)/(std + ε), …]`.
pub fn content_advantages(values: &BranchValues, eps_std: f64) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(
            values
                .gen_rewards
                .iter()
                .map(|r| (r - values.v_gen) / (values.gen_std + eps_std)),
        )
        .collect()
}

/// Routes decision and content advantages onto token positions.
pub fn per_token_advantages(
    group: &RolloutGroup,
    decision: &[f64],
    content: &[f64],
    delta: f64,
    gating: Gating,
) -> Result<AdvantageTensor> {
    let g = group.group_size();
    if decision.len() != g || content.len() != g {
        return Err(Error::Contract(format!(
            "advantage vectors sized {}/{} for a group of {g}",
            decision.len(),
            content.len()
        )));
    }
    let gate = if delta < 0.0 { 1.0 } else { 0.0 };
    let per_token = group
        .branches
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let content_adv = match gating {
                Gating::Gated => gate * content[j],
                Gating::NaiveSum => decision[j] + content[j],
            };
            (0..b.output.serialized_len())
                .map(|t| {
                    if t < DECISION_PREFIX_LEN {
                        decision[j]
                    } else {
                        content_adv
                    }
                })
                .collect()
        })
        .collect();
    Ok(AdvantageTensor {
        decision: decision.to_vec(),
        content: content.to_vec(),
        per_token,
    })
}

/// `Â = (r − mean)/(std + ε)` over the whole group.
pub fn vanilla_group_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let m = mean(rewards);
    let s = population_std(rewards, m);
    rewards.iter().map(|r| (r - m) / (s + eps_std)).collect()
}

/// Broadcasts one scalar per branch to all of its tokens.
pub fn broadcast_advantages(group: &RolloutGroup, scalars: &[f64]) -> Result<AdvantageTensor> {
    if scalars.len() != group.group_size() {
        return Err(Error::Contract("one scalar advantage per branch expected".into()));
    }
    Ok(AdvantageTensor {
        decision: scalars.to_vec(),
        content: scalars.to_vec(),
        per_token: group
            .branches
            .iter()
            .zip(scalars)
            .map(|(b, &a)| vec![a; b.output.serialized_len()])
            .collect(),
    })
}

pub trait AdvantageEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    /// The rollout layout this estimator consumes.
    fn rollout_mode(&self) -> RolloutMode;
    fn estimate(&self, group: &RolloutGroup, eps_std: f64) -> Result<AdvantageTensor>;
}

pub struct Decoupled {
    pub gating: Gating,
}

impl AdvantageEstimator for Decoupled {
    fn name(&self) -> &'static str {
        match self.gating {
            Gating::Gated => "decoupled",
            Gating::NaiveSum => "naive-sum",
        }
    }

    fn rollout_mode(&self) -> RolloutMode {
        RolloutMode::Structured
    }

    fn estimate(&self, group: &RolloutGroup, eps_std: f64) -> Result<AdvantageTensor> {
        let values = branch_values(group)?;
        let a_d = decision_advantages(&values, group.group_size());
        let a_c = content_advantages(&values, eps_std);
        per_token_advantages(group, &a_d, &a_c, values.delta, self.gating)
    }
}

pub struct VanillaGrpo;

impl AdvantageEstimator for VanillaGrpo {
    fn name(&self) -> &'static str {
        "grpo"
    }

    fn rollout_mode(&self) -> RolloutMode {
        RolloutMode::Iid
    }

    fn estimate(&self, group: &RolloutGroup, eps_std: f64) -> Result<AdvantageTensor> {
        let scalars = vanilla_group_advantages(&group.rewards()?, eps_std);
        broadcast_advantages(group, &scalars)
    }
}

#[derive(Clone)]
pub struct EstimatorRegistry {
    estimators: BTreeMap<&'static str, Arc<dyn AdvantageEstimator>>,
}

impl EstimatorRegistry {
    pub fn empty() -> Self {
        Self {
            estimators: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(Decoupled { gating: Gating::Gated }));
        r.register(Arc::new(Decoupled {
            gating: Gating::NaiveSum,
        }));
        r.register(Arc::new(VanillaGrpo));
        r
    }

    pub fn register(&mut self, estimator: Arc<dyn AdvantageEstimator>) {
        self.estimators.insert(estimator.name(), estimator);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn AdvantageEstimator>> {
        self.estimators
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: "advantage estimator",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.estimators.keys().copied()
    }
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
