//! Adaptation stage: clipped importance-weighted surrogate with per-token
//! advantages and a token-level KL penalty to the reference policy.
//!
//! For a group of `G` branches the objective is
//!
//! ```text
//! (1/G) Σ_j (1/|y_j|) Σ_t [ min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t) − β KL_t ]
//! ```
//!
//! with `ρ_t = π(y_t)/π_old(y_t)`. Batches average the group objectives.

use std::collections::HashSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageEstimator, AdvantageTensor, EstimatorRegistry, Gating};
use crate::bank::{ExperienceBank, SplitTag};
use crate::env::{Agent, Context, Environment};
use crate::error::{Error, Result};
use crate::policy::{kl, kl_logit_grad, score_logit_grad, Gradient, PolicyParameters, SamplingParams, Weights};
use crate::reward::{strip_for_count, RewardConfig};
use crate::rollout::{evaluate_group, rollout, RewardSpec, RolloutGroup, RolloutMode};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub group_size: usize,
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub eps_std: f64,
    pub learning_rate: f64,
    /// Global gradient-norm cap applied before each ascent step.
    pub max_grad_norm: f64,
    pub steps: usize,
    pub contexts_per_step: usize,
    pub inner_epochs: usize,
    pub gating: Gating,
    pub rollout_mode: RolloutMode,
    pub use_length_reward: bool,
    pub unified_mode: bool,
    /// Weight on the similarity reward in unified mode.
    pub similarity_weight: f64,
    /// Re-balance the decision rows before the first step.
    pub symmetric_init: bool,
    /// Accept a policy that never went through distillation.
    pub from_scratch: bool,
    pub abstain_repeats: usize,
    pub sampling: SamplingParams,
    pub reward: RewardConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            group_size: 4,
            eps_clip: 0.2,
            beta_kl: 0.01,
            eps_std: 1e-6,
            learning_rate: 0.05,
            max_grad_norm: 1.0,
            steps: 200,
            contexts_per_step: 8,
            inner_epochs: 1,
            gating: Gating::Gated,
            rollout_mode: RolloutMode::Structured,
            use_length_reward: true,
            unified_mode: false,
            similarity_weight: 1.0,
            symmetric_init: true,
            from_scratch: false,
            abstain_repeats: 1,
            sampling: SamplingParams::default(),
            reward: RewardConfig::default(),
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        let positive = self.eps_clip > 0.0
            && self.eps_std > 0.0
            && self.learning_rate > 0.0
            && self.max_grad_norm > 0.0
            && self.contexts_per_step > 0
            && self.inner_epochs > 0
            && self.abstain_repeats > 0
            && self.beta_kl >= 0.0;
        if !positive {
            return Err(Error::Domain("stage2 rates, sizes and epochs must be positive".into()));
        }
        let min_g = match self.rollout_mode {
            RolloutMode::Structured => 2,
            RolloutMode::Iid => 1,
        };
        if self.group_size < min_g {
            return Err(Error::Domain(format!(
                "group_size {} too small for {:?} rollouts",
                self.group_size, self.rollout_mode
            )));
        }
        self.sampling.validate()?;
        self.reward.validate()?;
        if self.sampling.max_content_tokens > self.reward.max_len {
            return Err(Error::Domain(
                "sampling budget exceeds the reward's L_max".into(),
            ));
        }
        Ok(())
    }

    /// Registry name of the advantage estimator this configuration selects.
    pub fn estimator_name(&self) -> &'static str {
        match (self.rollout_mode, self.gating) {
            (RolloutMode::Iid, _) => "grpo",
            (RolloutMode::Structured, Gating::Gated) => "decoupled",
            (RolloutMode::Structured, Gating::NaiveSum) => "naive-sum",
        }
    }

    /// Reward settings after the length and similarity switches.
    pub fn effective_reward(&self) -> RewardConfig {
        RewardConfig {
            lambda_len: if self.use_length_reward { self.reward.lambda_len } else { 0.0 },
            max_len: self.reward.max_len,
            similarity_weight: if self.unified_mode { self.similarity_weight } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean exact `P(abstain | x)` over the training contexts before the update.
    pub abstain_rate: f64,
    pub mean_mem_len: f64,
    pub surrogate: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_reward,abstain_rate,mean_mem_len,surrogate,mean_kl\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.mean_reward, r.abstain_rate, r.mean_mem_len, r.surrogate, r.mean_kl
            ));
        }
        out
    }
}

struct GroupTerms {
    objective: f64,
    kl_sum: f64,
    tokens: usize,
    grad: Option<Weights>,
}

fn group_terms(
    policy: &PolicyParameters,
    policy_old: &PolicyParameters,
    policy_ref: &PolicyParameters,
    group: &RolloutGroup,
    adv: &AdvantageTensor,
    config: &Stage2Config,
    want_grad: bool,
) -> Result<GroupTerms> {
    policy.check_compatible(policy_old)?;
    policy.check_compatible(policy_ref)?;
    if adv.per_token.len() != group.group_size() {
        return Err(Error::Contract(format!(
            "advantages cover {} branches, group has {}",
            adv.per_token.len(),
            group.group_size()
        )));
    }
    let features = &group.context.features;
    let g = group.group_size() as f64;
    let (lo, hi) = (1.0 - config.eps_clip, 1.0 + config.eps_clip);
    let mut grad = want_grad.then(|| Weights::zeros_like(&policy.weights));
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut tokens_seen = 0;

    for (j, branch) in group.branches.iter().enumerate() {
        branch.output.check(&policy.vocab)?;
        let tokens = branch.output.tokens(&policy.vocab);
        let a_t = &adv.per_token[j];
        if a_t.len() != tokens.len() {
            return Err(Error::Contract(format!(
                "branch {j}: {} advantages for {} tokens",
                a_t.len(),
                tokens.len()
            )));
        }
        let mut old_lp = Vec::with_capacity(tokens.len());
        policy_old.walk(features, &tokens, |s| old_lp.push(s.log_probs[s.slot]))?;
        let mut ref_lp = Vec::with_capacity(tokens.len());
        policy_ref.walk(features, &tokens, |s| ref_lp.push(s.log_probs.to_vec()))?;

        let weight = 1.0 / (g * tokens.len() as f64);
        let mut branch_sum = 0.0;
        policy.walk(features, &tokens, |s| {
            let t = s.index;
            let a = a_t[t];
            let ratio = (s.log_probs[s.slot] - old_lp[t]).exp();
            let unclipped = ratio * a;
            let clipped = ratio.clamp(lo, hi) * a;
            let kl_t = kl(s.probs, s.log_probs, &ref_lp[t]);
            branch_sum += unclipped.min(clipped) - config.beta_kl * kl_t;
            kl_sum += kl_t;
            if let Some(gw) = grad.as_mut() {
                // The min picks the unclipped branch (ties included): its
                // derivative is A·ρ·∇log π. Otherwise the clipped branch is flat.
                let mut lg = vec![0.0; s.probs.len()];
                if unclipped <= clipped && a != 0.0 {
                    for (l, sg) in lg.iter_mut().zip(score_logit_grad(&s)) {
                        *l += a * ratio * sg;
                    }
                }
                if config.beta_kl != 0.0 {
                    for (l, kg) in lg.iter_mut().zip(kl_logit_grad(s.probs, s.log_probs, &ref_lp[t])) {
                        *l -= config.beta_kl * kg;
                    }
                }
                policy.add_logit_grad(features, s.counts, s.allowed, &lg, weight, gw);
            }
        })?;
        tokens_seen += tokens.len();
        objective += branch_sum / tokens.len() as f64;
    }
    Ok(GroupTerms {
        objective: objective / g,
        kl_sum,
        tokens: tokens_seen,
        grad,
    })
}

/// Surrogate objective of one group.
pub fn surrogate_objective(
    policy: &PolicyParameters,
    policy_old: &PolicyParameters,
    policy_ref: &PolicyParameters,
    group: &RolloutGroup,
    adv: &AdvantageTensor,
    config: &Stage2Config,
) -> Result<f64> {
    Ok(group_terms(policy, policy_old, policy_ref, group, adv, config, false)?.objective)
}

/// Mean surrogate over a batch of groups.
pub fn batch_objective(
    policy: &PolicyParameters,
    policy_old: &PolicyParameters,
    policy_ref: &PolicyParameters,
    groups: &[RolloutGroup],
    advs: &[AdvantageTensor],
    config: &Stage2Config,
) -> Result<f64> {
    check_batch(groups, advs)?;
    let mut total = 0.0;
    for (g, a) in groups.iter().zip(advs) {
        total += surrogate_objective(policy, policy_old, policy_ref, g, a, config)?;
    }
    Ok(total / groups.len() as f64)
}

fn check_batch(groups: &[RolloutGroup], advs: &[AdvantageTensor]) -> Result<()> {
    if groups.is_empty() || groups.len() != advs.len() {
        return Err(Error::Contract(format!(
            "{} groups with {} advantage tensors",
            groups.len(),
            advs.len()
        )));
    }
    Ok(())
}

/// Exact gradient of [`batch_objective`]. Per-group gradients are computed in
/// parallel and summed in batch order.
pub fn objective_gradient(
    policy: &PolicyParameters,
    policy_old: &PolicyParameters,
    policy_ref: &PolicyParameters,
    groups: &[RolloutGroup],
    advs: &[AdvantageTensor],
    config: &Stage2Config,
) -> Result<Gradient> {
    check_batch(groups, advs)?;
    let parts: Vec<Weights> = groups
        .par_iter()
        .zip(advs.par_iter())
        .map(|(g, a)| {
            group_terms(policy, policy_old, policy_ref, g, a, config, true)
                .map(|t| t.grad.expect("gradient requested"))
        })
        .collect::<Result<_>>()?;
    let mut grad = Weights::zeros_like(&policy.weights);
    let n = groups.len() as f64;
    for p in &parts {
        grad.add_scaled(p, 1.0 / n);
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("stage2 objective gradient".into()));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub max_grad_norm: f64,
    pub last_grad_norm: f64,
    pub clipped_updates: usize,
    pub updates: usize,
}

impl OptimizerState {
    pub fn new(max_grad_norm: f64) -> Self {
        Self {
            max_grad_norm,
            last_grad_norm: 0.0,
            clipped_updates: 0,
            updates: 0,
        }
    }
}

/// Gradient ascent with global norm clipping.
pub fn apply_update(
    policy: &mut PolicyParameters,
    gradient: &Gradient,
    state: &mut OptimizerState,
    learning_rate: f64,
) {
    let norm = gradient.norm();
    let scale = if norm > state.max_grad_norm {
        state.clipped_updates += 1;
        state.max_grad_norm / norm
    } else {
        1.0
    };
    state.last_grad_norm = norm;
    state.updates += 1;
    if learning_rate != 0.0 && norm != 0.0 {
        policy.weights.add_scaled(gradient, learning_rate * scale);
    }
}

pub fn mean_abstain_probability(policy: &PolicyParameters, contexts: &[Context]) -> Result<f64> {
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for c in contexts {
        total += policy.abstain_probability(&c.features)?;
    }
    Ok(total / contexts.len() as f64)
}

/// Observer hook called after every step with the updated policy.
pub type StepHook<'a> = dyn FnMut(&StepRecord, &PolicyParameters) -> Result<()> + 'a;

/// Runs the adaptation loop against the environment's simulated agent.
pub fn train_stage2(
    policy: &PolicyParameters,
    env: &Environment,
    bank: &ExperienceBank,
    config: &Stage2Config,
) -> Result<(PolicyParameters, TrainingHistory)> {
    train_stage2_with(policy, env, env, bank, config, &EstimatorRegistry::builtin(), &mut |_, _| Ok(()))
}

/// Full-control variant: explicit agent, estimator registry and step hook.
pub fn train_stage2_with(
    policy: &PolicyParameters,
    env: &Environment,
    agent: &dyn Agent,
    bank: &ExperienceBank,
    config: &Stage2Config,
    registry: &EstimatorRegistry,
    hook: &mut StepHook<'_>,
) -> Result<(PolicyParameters, TrainingHistory)> {
    config.validate()?;
    if policy.stage < 1 && !config.from_scratch {
        return Err(Error::Domain(
            "stage2 expects a distilled policy; set from_scratch for the no-distillation ablations".into(),
        ));
    }
    let estimator = registry.get(config.estimator_name())?;
    if estimator.rollout_mode() != config.rollout_mode {
        return Err(Error::Config(format!(
            "estimator `{}` does not consume {:?} rollouts",
            estimator.name(),
            config.rollout_mode
        )));
    }
    let train_bank = bank.with_tag(SplitTag::Train);
    let train_ids: HashSet<&str> = train_bank.context_ids();
    let pool: Vec<Context> = env
        .contexts
        .iter()
        .filter(|c| train_ids.contains(c.context_id.as_str()))
        .cloned()
        .collect();
    if pool.is_empty() {
        return Err(Error::Domain("no environment context appears in the bank's train split".into()));
    }
    let references: Vec<Option<Vec<u32>>> = if config.unified_mode {
        pool.iter()
            .map(|c| train_bank.nearest(&c.features).map(|e| e.guidance_tokens.clone()))
            .collect()
    } else {
        vec![None; pool.len()]
    };

    let mut policy = policy.clone();
    if config.symmetric_init {
        policy.symmetrize_decisions();
    }
    let policy_ref = policy.snapshot();
    let reward_cfg = config.effective_reward();
    let mut opt = OptimizerState::new(config.max_grad_norm);
    let mut history = TrainingHistory::default();

    for step in 0..config.steps {
        let record = run_step(
            &mut policy,
            &policy_ref,
            &pool,
            &references,
            agent,
            estimator.as_ref(),
            &reward_cfg,
            config,
            &mut opt,
            step,
        )
        .map_err(|e| e.at_step(step))?;
        log::debug!(
            "stage2 step {step}: reward {:.3} abstain {:.3} |m| {:.2}",
            record.mean_reward,
            record.abstain_rate,
            record.mean_mem_len
        );
        hook(&record, &policy)?;
        history.steps.push(record);
    }
    policy.stage = 2;
    Ok((policy, history))
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    policy: &mut PolicyParameters,
    policy_ref: &PolicyParameters,
    pool: &[Context],
    references: &[Option<Vec<u32>>],
    agent: &dyn Agent,
    estimator: &dyn AdvantageEstimator,
    reward_cfg: &RewardConfig,
    config: &Stage2Config,
    opt: &mut OptimizerState,
    step: usize,
) -> Result<StepRecord> {
    let policy_old = policy.snapshot();
    let abstain_rate = mean_abstain_probability(&policy_old, pool)?;
    let mut pick_rng = rng::stream(config.seed, &[rng::hash_str("stage2-contexts"), step as u64]);
    let n = config.contexts_per_step.min(pool.len());
    let mut picked = index::sample(&mut pick_rng, pool.len(), n).into_vec();
    picked.sort_unstable();

    let built: Vec<(RolloutGroup, AdvantageTensor)> = picked
        .par_iter()
        .map(|&ci| {
            let ctx = &pool[ci];
            let seed = rng::derive_seed(config.seed, &[rng::hash_str("stage2-group"), step as u64, ci as u64]);
            let mut group = rollout(
                config.rollout_mode,
                &policy_old,
                ctx,
                config.group_size,
                &config.sampling,
                seed,
            )?;
            let spec = RewardSpec {
                config: reward_cfg,
                similarity_reference: references[ci].as_deref(),
                abstain_repeats: config.abstain_repeats,
            };
            evaluate_group(&mut group, agent, &spec)?;
            let adv = estimator.estimate(&group, config.eps_std)?;
            Ok((group, adv))
        })
        .collect::<Result<_>>()?;
    let (groups, advs): (Vec<_>, Vec<_>) = built.into_iter().unzip();

    let mut reward_sum = 0.0;
    let mut branches = 0usize;
    let mut gen_len = 0usize;
    let mut gen_count = 0usize;
    for g in &groups {
        for b in &g.branches {
            reward_sum += b.reward()?;
            branches += 1;
            if b.output.memory().is_some() {
                gen_len += strip_for_count(&b.output);
                gen_count += 1;
            }
        }
    }

    let mut surrogate = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_tokens = 0usize;
    for (g, a) in groups.iter().zip(&advs) {
        let t = group_terms(policy, &policy_old, policy_ref, g, a, config, false)?;
        surrogate += t.objective;
        kl_sum += t.kl_sum;
        kl_tokens += t.tokens;
    }

    for _ in 0..config.inner_epochs {
        let grad = objective_gradient(policy, &policy_old, policy_ref, &groups, &advs, config)?;
        apply_update(policy, &grad, opt, config.learning_rate);
        log::trace!("grad norm {:.4}", opt.last_grad_norm);
    }

    Ok(StepRecord {
        step,
        mean_reward: reward_sum / branches as f64,
        abstain_rate,
        mean_mem_len: if gen_count == 0 { 0.0 } else { gen_len as f64 / gen_count as f64 },
        surrogate: surrogate / groups.len() as f64,
        mean_kl: if kl_tokens == 0 { 0.0 } else { kl_sum / kl_tokens as f64 },
    })
}
