//! Experience distillation: maximum likelihood on bank guidance.
//!
//! Each entry becomes the target `[GENERATE] ⊕ m ⊕ [EOS]`; the decision token
//! and EOS are supervised together with the content.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{ExperienceBank, ExperienceEntry, SplitTag};
use crate::error::{Error, Result};
use crate::policy::{score_logit_grad, Gradient, MemoryOutput, PolicyParameters, Weights};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 3,
            grad_clip_norm: 3.0,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Domain(
                "stage1 learning_rate, batch_size and grad_clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn target_output(entry: &ExperienceEntry) -> MemoryOutput {
    MemoryOutput::generate(entry.guidance_tokens.clone())
}

fn entry_nll(policy: &PolicyParameters, entry: &ExperienceEntry, grad: Option<&mut Weights>) -> Result<f64> {
    let target = target_output(entry);
    target.check(&policy.vocab)?;
    let tokens = target.tokens(&policy.vocab);
    let features = &entry.context_features;
    let mut nll = 0.0;
    match grad {
        Some(g) => policy.walk(features, &tokens, |s| {
            nll -= s.log_probs[s.slot];
            let lg = score_logit_grad(&s);
            policy.add_logit_grad(features, s.counts, s.allowed, &lg, -1.0, g);
        })?,
        None => policy.walk(features, &tokens, |s| nll -= s.log_probs[s.slot])?,
    }
    Ok(nll)
}

/// Mean negative log-likelihood over the batch.
pub fn stage1_loss(policy: &PolicyParameters, batch: &[ExperienceEntry]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("stage1 batch is empty".into()));
    }
    let losses: Vec<f64> = batch
        .par_iter()
        .map(|e| entry_nll(policy, e, None))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Loss and its gradient w.r.t. the parameters. Per-entry terms are reduced
/// in batch order.
pub fn stage1_loss_and_grad(policy: &PolicyParameters, batch: &[ExperienceEntry]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Domain("stage1 batch is empty".into()));
    }
    let parts: Vec<(f64, Weights)> = batch
        .par_iter()
        .map(|e| {
            let mut g = Weights::zeros_like(&policy.weights);
            let l = entry_nll(policy, e, Some(&mut g))?;
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut grad = Weights::zeros_like(&policy.weights);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_scaled(g, 1.0 / n);
    }
    Ok((loss / n, grad))
}

/// Rescales `grad` to norm `max_norm` when it exceeds it; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut Gradient, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Minibatch gradient descent on the train split. Returns the policy tagged
/// stage 1 and the full-train mean loss after each epoch.
pub fn train_stage1(
    policy: &PolicyParameters,
    bank: &ExperienceBank,
    config: &Stage1Config,
) -> Result<(PolicyParameters, Vec<f64>)> {
    config.validate()?;
    let train: Vec<ExperienceEntry> = bank
        .entries
        .iter()
        .filter(|e| e.split_tag == SplitTag::Train)
        .cloned()
        .collect();
    if train.is_empty() {
        return Err(Error::Domain("bank has no train-split entries".into()));
    }
    let mut policy = policy.clone();
    if config.epochs == 0 {
        return Ok((policy, Vec::new()));
    }
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(config.seed, &[rng::hash_str("stage1"), epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ExperienceEntry> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, mut grad) = stage1_loss_and_grad(&policy, &batch)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "stage1 epoch {epoch}: loss {loss}"
                )));
            }
            clip_grad_norm(&mut grad, config.grad_clip_norm);
            policy.weights.add_scaled(&grad, -config.learning_rate);
        }
        let epoch_loss = stage1_loss(&policy, &train)?;
        log::debug!("stage1 epoch {epoch}: loss {epoch_loss:.5}");
        history.push(epoch_loss);
    }
    policy.stage = 1;
    Ok((policy, history))
}
