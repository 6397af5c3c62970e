//! The memory policy: a position-masked linear-softmax autoregressive model.
//!
//! For context features `phi` and the count vector `c` of tokens already
//! emitted, the next-token logits are `A·phi + B·c + b`. Position 0 admits
//! only the two decision tokens; after `[GENERATE]` the policy emits content
//! tokens or EOS; `[ABSTAIN]` and EOS terminate the sequence.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// Content tokens `0..content_size`, followed by the three special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "VocabRecord", try_from = "VocabRecord")]
pub struct Vocabulary {
    content_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    content_size: usize,
    generate_id: TokenId,
    abstain_id: TokenId,
    eos_id: TokenId,
}

impl From<Vocabulary> for VocabRecord {
    fn from(v: Vocabulary) -> Self {
        VocabRecord {
            content_size: v.content_size,
            generate_id: v.generate_id(),
            abstain_id: v.abstain_id(),
            eos_id: v.eos_id(),
        }
    }
}

impl TryFrom<VocabRecord> for Vocabulary {
    type Error = String;

    fn try_from(r: VocabRecord) -> std::result::Result<Self, String> {
        let v = Vocabulary::new(r.content_size).map_err(|e| e.to_string())?;
        if (r.generate_id, r.abstain_id, r.eos_id) != (v.generate_id(), v.abstain_id(), v.eos_id())
        {
            return Err("special token ids must follow the content range".into());
        }
        Ok(v)
    }
}

impl Vocabulary {
    pub fn new(content_size: usize) -> Result<Self> {
        if content_size == 0 {
            return Err(Error::Domain("content_size must be positive".into()));
        }
        Ok(Self { content_size })
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn generate_id(&self) -> TokenId {
        self.content_size as TokenId
    }

    pub fn abstain_id(&self) -> TokenId {
        self.content_size as TokenId + 1
    }

    pub fn eos_id(&self) -> TokenId {
        self.content_size as TokenId + 2
    }

    /// Total vocabulary size including the special tokens.
    pub fn size(&self) -> usize {
        self.content_size + 3
    }

    pub fn is_content(&self, tok: TokenId) -> bool {
        (tok as usize) < self.content_size
    }

    pub fn decision_token(&self, d: Decision) -> TokenId {
        match d {
            Decision::Generate => self.generate_id(),
            Decision::Abstain => self.abstain_id(),
        }
    }

    fn allowed(&self, slot: Slot) -> Vec<TokenId> {
        match slot {
            Slot::Decision => vec![self.generate_id(), self.abstain_id()],
            Slot::Content => (0..self.content_size as TokenId)
                .chain(std::iter::once(self.eos_id()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Generate,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Eos,
    Budget,
}

/// `y = d ⊕ m`: a decision token followed by content (empty on abstain).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryOutput {
    pub decision: Decision,
    pub content: Vec<TokenId>,
    pub terminated_by: Termination,
}

impl MemoryOutput {
    pub fn abstain() -> Self {
        Self {
            decision: Decision::Abstain,
            content: Vec::new(),
            terminated_by: Termination::Eos,
        }
    }

    pub fn generate(content: Vec<TokenId>) -> Self {
        Self {
            decision: Decision::Generate,
            content,
            terminated_by: Termination::Eos,
        }
    }

    /// Serialized tokens: decision, content, then EOS when generation ended on it.
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut toks = Vec::with_capacity(self.content.len() + 2);
        toks.push(vocab.decision_token(self.decision));
        if self.decision == Decision::Generate {
            toks.extend_from_slice(&self.content);
            if self.terminated_by == Termination::Eos {
                toks.push(vocab.eos_id());
            }
        }
        toks
    }

    /// Number of serialized tokens, `|y|`.
    pub fn serialized_len(&self) -> usize {
        match self.decision {
            Decision::Abstain => 1,
            Decision::Generate => {
                1 + self.content.len() + usize::from(self.terminated_by == Termination::Eos)
            }
        }
    }

    /// The memory handed to the agent: `None` when abstaining.
    pub fn memory(&self) -> Option<&[TokenId]> {
        match self.decision {
            Decision::Abstain => None,
            Decision::Generate => Some(&self.content),
        }
    }

    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        if self.decision == Decision::Abstain && !self.content.is_empty() {
            return Err(Error::Contract("abstain output carries content".into()));
        }
        if let Some(t) = self.content.iter().find(|&&t| !vocab.is_content(t)) {
            return Err(Error::Contract(format!("token {t} is not a content token")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_content_tokens: usize,
    pub seed: u64,
    /// Argmax decoding; overrides temperature and top_p.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_content_tokens: 8,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_content_tokens: usize) -> Self {
        Self {
            greedy: true,
            max_content_tokens,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Domain("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Domain("top_p must lie in (0, 1]".into()));
        }
        if self.max_content_tokens == 0 {
            return Err(Error::Domain("max_content_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Dense parameter tensors; also used as the gradient record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `V'×F`, row-major.
    pub context: Vec<f64>,
    /// `V'×V'`, row-major.
    pub prefix: Vec<f64>,
    pub bias: Vec<f64>,
}

pub type Gradient = Weights;

impl Weights {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            context: vec![0.0; vocab_size * feature_dim],
            prefix: vec![0.0; vocab_size * vocab_size],
            bias: vec![0.0; vocab_size],
        }
    }

    pub fn zeros_like(other: &Weights) -> Self {
        Self {
            context: vec![0.0; other.context.len()],
            prefix: vec![0.0; other.prefix.len()],
            bias: vec![0.0; other.bias.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.context.len() + self.prefix.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.context.iter().chain(&self.prefix).chain(&self.bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.context
            .iter_mut()
            .chain(self.prefix.iter_mut())
            .chain(self.bias.iter_mut())
    }

    /// Flat view index `i` across (context, prefix, bias).
    pub fn get_flat(&self, i: usize) -> f64 {
        *self.iter().nth(i).expect("flat index out of range")
    }

    pub fn flat_mut(&mut self, i: usize) -> &mut f64 {
        self.iter_mut().nth(i).expect("flat index out of range")
    }

    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.iter_mut() {
            *a *= s;
        }
    }

    pub fn dot(&self, other: &Weights) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Decision,
    Content,
}

/// One autoregressive step over a serialized output.
pub(crate) struct Step<'a> {
    /// Position in the serialized sequence.
    pub index: usize,
    pub allowed: &'a [TokenId],
    /// Index of `token` within `allowed`.
    pub slot: usize,
    pub probs: &'a [f64],
    pub log_probs: &'a [f64],
    pub counts: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub feature_dim: usize,
    pub vocab: Vocabulary,
    pub weights: Weights,
    /// 0 = untrained, 1 = after distillation, 2 = after policy optimization.
    pub stage: u8,
}

/// On-disk checkpoint layout.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    feature_dim: usize,
    vocab: Vocabulary,
    #[serde(rename = "A")]
    context: Vec<f64>,
    #[serde(rename = "B")]
    prefix: Vec<f64>,
    #[serde(rename = "b")]
    bias: Vec<f64>,
    stage: u8,
}

fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = sum.ln();
    let probs = exps.iter().map(|e| e / sum).collect();
    let logs = logits.iter().map(|z| z - max - log_sum).collect();
    (probs, logs)
}

/// Builds the policy with symmetric decision rows: `A` and `B` are drawn
/// i.i.d. from `N(0, init_scale^2)`, `b` starts at zero, then the GENERATE and
/// ABSTAIN rows are replaced by their mean.
pub fn init_policy(
    feature_dim: usize,
    vocab: Vocabulary,
    init_scale: f64,
    seed: u64,
) -> Result<PolicyParameters> {
    if feature_dim == 0 {
        return Err(Error::Domain("feature_dim must be positive".into()));
    }
    if !(init_scale >= 0.0) || !init_scale.is_finite() {
        return Err(Error::Domain(format!("init_scale must be >= 0, got {init_scale}")));
    }
    let mut weights = Weights::zeros(vocab.size(), feature_dim);
    let mut rng = rng::stream(seed, &[rng::hash_str("init_policy")]);
    for w in weights.context.iter_mut().chain(weights.prefix.iter_mut()) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *w = init_scale * z;
    }
    let mut policy = PolicyParameters {
        feature_dim,
        vocab,
        weights,
        stage: 0,
    };
    policy.symmetrize_decisions();
    Ok(policy)
}

impl PolicyParameters {
    pub fn zeros(feature_dim: usize, vocab: Vocabulary) -> Self {
        Self {
            feature_dim,
            vocab,
            weights: Weights::zeros(vocab.size(), feature_dim),
            stage: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    /// Replaces the GENERATE and ABSTAIN rows of `A`, `B` and `b` with their
    /// elementwise mean, so both decisions share identical position-0 logits.
    pub fn symmetrize_decisions(&mut self) {
        let v = self.vocab.size();
        let f = self.feature_dim;
        let g = self.vocab.generate_id() as usize;
        let a = self.vocab.abstain_id() as usize;
        let w = &mut self.weights;
        for col in 0..f {
            let m = 0.5 * (w.context[g * f + col] + w.context[a * f + col]);
            w.context[g * f + col] = m;
            w.context[a * f + col] = m;
        }
        for col in 0..v {
            let m = 0.5 * (w.prefix[g * v + col] + w.prefix[a * v + col]);
            w.prefix[g * v + col] = m;
            w.prefix[a * v + col] = m;
        }
        let m = 0.5 * (w.bias[g] + w.bias[a]);
        w.bias[g] = m;
        w.bias[a] = m;
    }

    /// Deep copy used for the rollout (old) and reference policies.
    pub fn snapshot(&self) -> PolicyParameters {
        self.clone()
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::Contract(format!(
                "expected {} features, got {}",
                self.feature_dim,
                features.len()
            )));
        }
        Ok(())
    }

    fn logits(&self, features: &[f64], counts: &[f64], allowed: &[TokenId]) -> Vec<f64> {
        let f = self.feature_dim;
        let v = self.vocab.size();
        let w = &self.weights;
        allowed
            .iter()
            .map(|&tok| {
                let row = tok as usize;
                let ctx: f64 = w.context[row * f..(row + 1) * f]
                    .iter()
                    .zip(features)
                    .map(|(a, x)| a * x)
                    .sum();
                let pre: f64 = w.prefix[row * v..(row + 1) * v]
                    .iter()
                    .zip(counts)
                    .filter(|(_, c)| **c != 0.0)
                    .map(|(b, c)| b * c)
                    .sum();
                ctx + pre + w.bias[row]
            })
            .collect()
    }

    /// Adds `scale * g` (a gradient w.r.t. the allowed logits) into `out`.
    pub(crate) fn add_logit_grad(
        &self,
        features: &[f64],
        counts: &[f64],
        allowed: &[TokenId],
        logit_grad: &[f64],
        scale: f64,
        out: &mut Weights,
    ) {
        let f = self.feature_dim;
        let v = self.vocab.size();
        for (&tok, &g) in allowed.iter().zip(logit_grad) {
            let s = scale * g;
            if s == 0.0 {
                continue;
            }
            let row = tok as usize;
            for (o, x) in out.context[row * f..(row + 1) * f].iter_mut().zip(features) {
                *o += s * x;
            }
            for (o, c) in out.prefix[row * v..(row + 1) * v].iter_mut().zip(counts) {
                if *c != 0.0 {
                    *o += s * c;
                }
            }
            out.bias[row] += s;
        }
    }

    /// Walks the serialized `tokens`, checking the grammar and handing each
    /// step's masked distribution to `visit`.
    pub(crate) fn walk(
        &self,
        features: &[f64],
        tokens: &[TokenId],
        mut visit: impl FnMut(Step<'_>),
    ) -> Result<()> {
        self.check_features(features)?;
        let vocab = self.vocab;
        let mut counts = vec![0.0; vocab.size()];
        let decision_allowed = vocab.allowed(Slot::Decision);
        let content_allowed = vocab.allowed(Slot::Content);
        for (index, &token) in tokens.iter().enumerate() {
            let allowed = if index == 0 {
                &decision_allowed
            } else {
                let prev = tokens[index - 1];
                if prev == vocab.abstain_id() || prev == vocab.eos_id() {
                    return Err(Error::Contract(format!(
                        "token at position {index} follows a terminal token"
                    )));
                }
                &content_allowed
            };
            let slot = allowed.iter().position(|&t| t == token).ok_or_else(|| {
                Error::Contract(format!(
                    "token {token} is masked at position {index}"
                ))
            })?;
            let logits = self.logits(features, &counts, allowed);
            let (probs, log_probs) = log_softmax(&logits);
            visit(Step {
                index,
                allowed,
                slot,
                probs: &probs,
                log_probs: &log_probs,
                counts: &counts,
            });
            counts[token as usize] += 1.0;
        }
        Ok(())
    }

    /// `π(· | x, prefix)` over the full vocabulary; masked ids carry zero mass.
    pub fn token_distribution(&self, features: &[f64], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let vocab = self.vocab;
        let slot = match prefix.last() {
            None => Slot::Decision,
            Some(&t) if t == vocab.abstain_id() || t == vocab.eos_id() => {
                return Err(Error::Contract("prefix already terminated".into()))
            }
            Some(_) => Slot::Content,
        };
        // Validates the prefix grammar.
        self.walk(features, prefix, |_| {})?;
        let mut counts = vec![0.0; vocab.size()];
        for &t in prefix {
            counts[t as usize] += 1.0;
        }
        let allowed = vocab.allowed(slot);
        let (probs, _) = log_softmax(&self.logits(features, &counts, &allowed));
        let mut dist = vec![0.0; vocab.size()];
        for (&t, p) in allowed.iter().zip(probs) {
            dist[t as usize] = p;
        }
        Ok(dist)
    }

    pub fn abstain_probability(&self, features: &[f64]) -> Result<f64> {
        Ok(self.token_distribution(features, &[])?[self.vocab.abstain_id() as usize])
    }

    /// Samples `y = d ⊕ m`. Returned log-probs are under the raw policy, not the
    /// temperature/top-p sampler.
    pub fn sample_output(
        &self,
        features: &[f64],
        params: &SamplingParams,
        rng: &mut impl Rng,
    ) -> Result<SampledOutput> {
        self.sample_output_with(features, params, None, rng)
    }

    /// As [`sample_output`](Self::sample_output), optionally forcing the
    /// decision token. A forced decision still records its true log-prob.
    pub fn sample_output_with(
        &self,
        features: &[f64],
        params: &SamplingParams,
        forced: Option<Decision>,
        rng: &mut impl Rng,
    ) -> Result<SampledOutput> {
        params.validate()?;
        self.check_features(features)?;
        let vocab = self.vocab;
        let mut counts = vec![0.0; vocab.size()];
        let mut log_probs = Vec::new();

        let allowed = vocab.allowed(Slot::Decision);
        let logits = self.logits(features, &counts, &allowed);
        let (probs, logs) = log_softmax(&logits);
        let slot = match forced {
            Some(d) => allowed.iter().position(|&t| t == vocab.decision_token(d)).unwrap(),
            None => pick(&logits, &probs, params, rng),
        };
        log_probs.push(logs[slot]);
        let decision_tok = allowed[slot];
        if decision_tok == vocab.abstain_id() {
            return Ok(SampledOutput {
                output: MemoryOutput::abstain(),
                log_probs,
            });
        }
        counts[decision_tok as usize] += 1.0;

        let allowed = vocab.allowed(Slot::Content);
        let mut content = Vec::new();
        let terminated_by = loop {
            if content.len() == params.max_content_tokens {
                break Termination::Budget;
            }
            let logits = self.logits(features, &counts, &allowed);
            let (probs, logs) = log_softmax(&logits);
            let slot = pick(&logits, &probs, params, rng);
            log_probs.push(logs[slot]);
            let tok = allowed[slot];
            if tok == vocab.eos_id() {
                break Termination::Eos;
            }
            content.push(tok);
            counts[tok as usize] += 1.0;
        };
        Ok(SampledOutput {
            output: MemoryOutput {
                decision: Decision::Generate,
                content,
                terminated_by,
            },
            log_probs,
        })
    }

    /// Per-token `log π(y_t | x, y_<t)` over the serialized output.
    pub fn sequence_log_prob(&self, features: &[f64], output: &MemoryOutput) -> Result<Vec<f64>> {
        output.check(&self.vocab)?;
        let mut out = Vec::with_capacity(output.serialized_len());
        self.walk(features, &output.tokens(&self.vocab), |s| {
            out.push(s.log_probs[s.slot])
        })?;
        Ok(out)
    }

    /// Gradient of each per-token log-probability w.r.t. the parameters.
    pub fn grad_log_prob(&self, features: &[f64], output: &MemoryOutput) -> Result<Vec<Gradient>> {
        output.check(&self.vocab)?;
        let mut grads = Vec::new();
        self.walk(features, &output.tokens(&self.vocab), |s| {
            let mut g = Weights::zeros_like(&self.weights);
            let logit_grad = score_logit_grad(&s);
            self.add_logit_grad(features, s.counts, s.allowed, &logit_grad, 1.0, &mut g);
            grads.push(g);
        })?;
        Ok(grads)
    }

    /// Exact `KL(self ‖ reference)` at every serialized position of `output`.
    pub fn kl_per_token(
        &self,
        reference: &PolicyParameters,
        features: &[f64],
        output: &MemoryOutput,
    ) -> Result<Vec<f64>> {
        self.check_compatible(reference)?;
        output.check(&self.vocab)?;
        let tokens = output.tokens(&self.vocab);
        let mut ref_logs = Vec::new();
        reference.walk(features, &tokens, |s| ref_logs.push(s.log_probs.to_vec()))?;
        let mut out = Vec::with_capacity(tokens.len());
        self.walk(features, &tokens, |s| {
            out.push(kl(s.probs, s.log_probs, &ref_logs[s.index]));
        })?;
        Ok(out)
    }

    pub(crate) fn check_compatible(&self, other: &PolicyParameters) -> Result<()> {
        if self.vocab != other.vocab || self.feature_dim != other.feature_dim {
            return Err(Error::Contract(
                "policies differ in vocabulary or feature dimension".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            feature_dim: self.feature_dim,
            vocab: self.vocab,
            context: self.weights.context.clone(),
            prefix: self.weights.prefix.clone(),
            bias: self.weights.bias.clone(),
            stage: self.stage,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let v = ck.vocab.size();
        let f = ck.feature_dim;
        if f == 0
            || ck.context.len() != v * f
            || ck.prefix.len() != v * v
            || ck.bias.len() != v
        {
            return Err(Error::Schema("checkpoint tensor shapes disagree with header".into()));
        }
        if ck.stage > 2 {
            return Err(Error::Schema(format!("unknown stage {}", ck.stage)));
        }
        let weights = Weights {
            context: ck.context,
            prefix: ck.prefix,
            bias: ck.bias,
        };
        if !weights.is_finite() {
            return Err(Error::Schema("checkpoint contains non-finite values".into()));
        }
        Ok(Self {
            feature_dim: f,
            vocab: ck.vocab,
            weights,
            stage: ck.stage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// `∂ log p_k / ∂ z_j = 1[j = k] − p_j` over the allowed logits.
pub(crate) fn score_logit_grad(step: &Step<'_>) -> Vec<f64> {
    let mut g: Vec<f64> = step.probs.iter().map(|p| -p).collect();
    g[step.slot] += 1.0;
    g
}

pub(crate) fn kl(probs: &[f64], log_probs: &[f64], ref_log_probs: &[f64]) -> f64 {
    let v: f64 = probs
        .iter()
        .zip(log_probs)
        .zip(ref_log_probs)
        .filter(|((p, _), _)| **p > 0.0)
        .map(|((p, lp), lr)| p * (lp - lr))
        .sum();
    v.max(0.0)
}

/// `∂ KL(p ‖ r) / ∂ z_j = p_j (log p_j − log r_j − KL)`.
pub(crate) fn kl_logit_grad(probs: &[f64], log_probs: &[f64], ref_log_probs: &[f64]) -> Vec<f64> {
    let k: f64 = probs
        .iter()
        .zip(log_probs)
        .zip(ref_log_probs)
        .map(|((p, lp), lr)| p * (lp - lr))
        .sum();
    probs
        .iter()
        .zip(log_probs)
        .zip(ref_log_probs)
        .map(|((p, lp), lr)| p * (lp - lr - k))
        .collect()
}

fn pick(logits: &[f64], probs: &[f64], params: &SamplingParams, rng: &mut impl Rng) -> usize {
    if params.greedy {
        // First maximum wins, so ties resolve to the lowest id.
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let weights: Vec<f64> = if params.temperature == 1.0 {
        probs.to_vec()
    } else {
        let scaled: Vec<f64> = logits.iter().map(|z| z / params.temperature).collect();
        log_softmax(&scaled).0
    };
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let mut kept = order.len();
    if params.top_p < 1.0 {
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        for (n, &i) in order.iter().enumerate() {
            cum += weights[i];
            if cum >= params.top_p {
                kept = n + 1;
                break;
            }
        }
    }
    let nucleus = &order[..kept];
    let total: f64 = nucleus.iter().map(|&i| weights[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in nucleus {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    *nucleus.last().unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledOutput {
    pub output: MemoryOutput,
    pub log_probs: Vec<f64>,
}
