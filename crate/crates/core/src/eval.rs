//! Evaluation: success rates per memory provider, abstention by difficulty
//! bin, memory-token usage and the eight-way success-set breakdown.
//!
//! Memory providers implement [`MemoryProvider`] and are built by name from
//! a [`ProviderRegistry`].

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{ExperienceBank, SplitTag};
use crate::env::{Agent, Context};
use crate::error::{Error, Result};
use crate::policy::{Decision, MemoryOutput, PolicyParameters, SamplingParams, TokenId};
use crate::reward::strip_for_count;
use crate::rng;

/// Supplies (or withholds) memory for a context.
pub trait MemoryProvider: Send + Sync {
    fn name(&self) -> &str;
    /// `None` means the agent runs on the bare context.
    fn memory(&self, context: &Context) -> Result<Option<Vec<TokenId>>>;
}

/// The unassisted agent.
pub struct NoMemory;

impl MemoryProvider for NoMemory {
    fn name(&self) -> &str {
        "base"
    }

    fn memory(&self, _context: &Context) -> Result<Option<Vec<TokenId>>> {
        Ok(None)
    }
}

/// Top-1 retrieval over the train split by feature cosine similarity.
pub struct Retrieval {
    pub bank: ExperienceBank,
}

impl Retrieval {
    pub fn new(bank: &ExperienceBank) -> Result<Self> {
        let train = bank.with_tag(SplitTag::Train);
        if train.is_empty() {
            return Err(Error::Domain("retrieval needs a non-empty train split".into()));
        }
        Ok(Self { bank: train })
    }
}

impl MemoryProvider for Retrieval {
    fn name(&self) -> &str {
        "retrieval"
    }

    fn memory(&self, context: &Context) -> Result<Option<Vec<TokenId>>> {
        retrieval_baseline(&self.bank, context, 1).map(Some)
    }
}

/// A memory policy decoded greedily (or sampled, when `sampling.greedy` is off).
pub struct PolicyMemory {
    pub name: String,
    pub policy: PolicyParameters,
    pub sampling: SamplingParams,
}

impl PolicyMemory {
    pub fn greedy(name: impl Into<String>, policy: PolicyParameters, max_content_tokens: usize) -> Self {
        Self {
            name: name.into(),
            policy,
            sampling: SamplingParams::greedy(max_content_tokens),
        }
    }

    pub fn output(&self, context: &Context) -> Result<MemoryOutput> {
        let mut r = rng::stream(self.sampling.seed, &[rng::hash_str(&context.context_id)]);
        Ok(self
            .policy
            .sample_output(&context.features, &self.sampling, &mut r)?
            .output)
    }
}

impl MemoryProvider for PolicyMemory {
    fn name(&self) -> &str {
        &self.name
    }

    fn memory(&self, context: &Context) -> Result<Option<Vec<TokenId>>> {
        Ok(self.output(context)?.memory().map(<[TokenId]>::to_vec))
    }
}

/// Everything a provider factory may need.
pub struct ProviderInputs<'a> {
    pub bank: &'a ExperienceBank,
    pub policy: Option<&'a PolicyParameters>,
    pub max_content_tokens: usize,
}

type ProviderFactory = fn(&ProviderInputs<'_>) -> Result<Box<dyn MemoryProvider>>;

pub struct ProviderRegistry {
    factories: BTreeMap<&'static str, ProviderFactory>,
}

impl ProviderRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("base", |_| Ok(Box::new(NoMemory)));
        r.register("retrieval", |inp| Ok(Box::new(Retrieval::new(inp.bank)?)));
        r.register("policy", |inp| {
            let policy = inp
                .policy
                .ok_or_else(|| Error::Config("the `policy` method needs a checkpoint".into()))?;
            Ok(Box::new(PolicyMemory::greedy(
                "policy",
                policy.clone(),
                inp.max_content_tokens,
            )))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: ProviderFactory) {
        self.factories.insert(name, factory);
    }

    pub fn build(&self, name: &str, inputs: &ProviderInputs<'_>) -> Result<Box<dyn MemoryProvider>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownName {
            kind: "memory provider",
            name: name.to_string(),
        })?;
        f(inputs)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }
}

/// Guidance of the most similar train entry.
pub fn retrieval_baseline(bank: &ExperienceBank, context: &Context, k: usize) -> Result<Vec<TokenId>> {
    if k != 1 {
        return Err(Error::Domain("only top-1 retrieval is supported".into()));
    }
    bank.nearest(&context.features)
        .map(|e| e.guidance_tokens.clone())
        .ok_or_else(|| Error::Domain("retrieval bank is empty".into()))
}

/// Per-context mean success over `trials` agent episodes.
pub fn context_success_rates(
    provider: &dyn MemoryProvider,
    agent: &dyn Agent,
    contexts: &[Context],
    trials: usize,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::Domain("trials_per_context must be at least 1".into()));
    }
    contexts
        .par_iter()
        .map(|c| {
            let memory = provider.memory(c)?;
            let mut wins = 0u32;
            for t in 0..trials {
                let ordinal = rng::derive_seed(rng::hash_str("eval"), &[t as u64]);
                wins += u32::from(agent.run(c, memory.as_deref(), ordinal)?.success);
            }
            Ok(f64::from(wins) / trials as f64)
        })
        .collect()
}

pub fn success_rate(
    provider: &dyn MemoryProvider,
    agent: &dyn Agent,
    contexts: &[Context],
    trials: usize,
) -> Result<f64> {
    let rates = context_success_rates(provider, agent, contexts, trials)?;
    Ok(mean(&rates))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub abstain_rate: f64,
    pub sr_improvement: f64,
    pub empty: bool,
}

/// Equal-width bins `[i/n, (i+1)/n)` on the base success rate (last bin
/// closed). Per bin: the policy's greedy abstention rate and its success-rate
/// gain over the base agent.
pub fn difficulty_bins(
    base_rates: &[f64],
    policy_rates: &[f64],
    abstained: &[bool],
    n_bins: usize,
) -> Result<Vec<BinRecord>> {
    if n_bins == 0 {
        return Err(Error::Domain("n_bins must be positive".into()));
    }
    if base_rates.len() != policy_rates.len() || base_rates.len() != abstained.len() {
        return Err(Error::Contract("bin inputs are misaligned".into()));
    }
    if let Some(r) = base_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Domain(format!("base rate {r} outside [0, 1]")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, &r) in base_rates.iter().enumerate() {
        members[bin_of(r, n_bins)].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, idx)| {
            let count = idx.len();
            let (abstain_rate, sr_improvement) = if count == 0 {
                (0.0, 0.0)
            } else {
                let n = count as f64;
                let abst = idx.iter().filter(|&&i| abstained[i]).count() as f64 / n;
                let gain = idx.iter().map(|&i| policy_rates[i] - base_rates[i]).sum::<f64>() / n;
                (abst, gain)
            };
            BinRecord {
                bin: b,
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count,
                abstain_rate,
                sr_improvement,
                empty: count == 0,
            }
        })
        .collect())
}

pub fn bin_of(rate: f64, n_bins: usize) -> usize {
    ((rate * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Mean `|m|` of greedy outputs; abstentions count as zero.
pub fn token_usage(policy: &PolicyParameters, contexts: &[Context], max_content_tokens: usize) -> Result<f64> {
    let provider = PolicyMemory::greedy("policy", policy.clone(), max_content_tokens);
    let lens: Vec<f64> = contexts
        .par_iter()
        .map(|c| Ok(strip_for_count(&provider.output(c)?) as f64))
        .collect::<Result<_>>()?;
    Ok(mean(&lens))
}

/// Greedy abstention decision per context.
pub fn greedy_abstentions(
    policy: &PolicyParameters,
    contexts: &[Context],
    max_content_tokens: usize,
) -> Result<Vec<bool>> {
    let provider = PolicyMemory::greedy("policy", policy.clone(), max_content_tokens);
    contexts
        .par_iter()
        .map(|c| Ok(provider.output(c)?.decision == Decision::Abstain))
        .collect()
}

pub const VENN_LABELS: [&str; 8] = ["000", "001", "010", "011", "100", "101", "110", "111"];

/// Counts per success triple, labelled `<base><retrieval><policy>`.
pub fn venn_regions(
    success_base: &[bool],
    success_retrieval: &[bool],
    success_policy: &[bool],
) -> Result<BTreeMap<String, usize>> {
    if success_base.len() != success_retrieval.len() || success_base.len() != success_policy.len() {
        return Err(Error::Contract("success sets cover different contexts".into()));
    }
    let mut counts: BTreeMap<String, usize> = VENN_LABELS.iter().map(|l| (l.to_string(), 0)).collect();
    for ((&b, &r), &p) in success_base.iter().zip(success_retrieval).zip(success_policy) {
        let label = format!("{}{}{}", u8::from(b), u8::from(r), u8::from(p));
        *counts.get_mut(&label).expect("all labels present") += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub success_rate: f64,
    pub mean_memory_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub contexts: usize,
    pub methods: Vec<MethodSummary>,
    pub bins: Vec<BinRecord>,
    pub venn: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,success_rate,mean_memory_tokens\n");
        for m in &self.methods {
            out.push_str(&format!("{},{},{}\n", m.method, m.success_rate, m.mean_memory_tokens));
        }
        out
    }

    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,lo,hi,count,abstain_rate,sr_improvement,empty\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                b.bin, b.lo, b.hi, b.count, b.abstain_rate, b.sr_improvement, b.empty
            ));
        }
        out
    }

    pub fn venn_csv(&self) -> String {
        let mut out = String::from("region,count\n");
        for (k, v) in &self.venn {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn success_of(&self, method: &str) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.success_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub trials_per_context: usize,
    pub n_bins: usize,
    pub max_content_tokens: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            trials_per_context: 1,
            n_bins: 5,
            max_content_tokens: 8,
        }
    }
}

/// Compares base, retrieval and the policy on `contexts`.
pub fn evaluate(
    agent: &dyn Agent,
    contexts: &[Context],
    bank: &ExperienceBank,
    policy: &PolicyParameters,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let registry = ProviderRegistry::builtin();
    let inputs = ProviderInputs {
        bank,
        policy: Some(policy),
        max_content_tokens: options.max_content_tokens,
    };
    let mut per_method = Vec::new();
    let mut methods = Vec::new();
    for name in ["base", "retrieval", "policy"] {
        let provider = registry.build(name, &inputs)?;
        let rates = context_success_rates(provider.as_ref(), agent, contexts, options.trials_per_context)?;
        let tokens: Vec<f64> = contexts
            .par_iter()
            .map(|c| Ok(provider.memory(c)?.map_or(0, |m| m.len()) as f64))
            .collect::<Result<_>>()?;
        methods.push(MethodSummary {
            method: name.to_string(),
            success_rate: mean(&rates),
            mean_memory_tokens: mean(&tokens),
        });
        per_method.push(rates);
    }
    let abstained = greedy_abstentions(policy, contexts, options.max_content_tokens)?;
    let bins = difficulty_bins(&per_method[0], &per_method[2], &abstained, options.n_bins)?;
    let as_bool = |v: &Vec<f64>| v.iter().map(|&r| r >= 0.5).collect::<Vec<_>>();
    let venn = venn_regions(&as_bool(&per_method[0]), &as_bool(&per_method[1]), &as_bool(&per_method[2]))?;
    Ok(EvalReport {
        contexts: contexts.len(),
        methods,
        bins,
        venn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BankHeader, ExperienceEntry};
    use crate::env::{make_environment, Archetype, EnvironmentSpec};

    fn env() -> crate::env::Environment {
        make_environment(&EnvironmentSpec {
            num_contexts: 30,
            ..EnvironmentSpec::default()
        })
        .unwrap()
    }

    struct KeyOracle;

    impl MemoryProvider for KeyOracle {
        fn name(&self) -> &str {
            "oracle"
        }

        fn memory(&self, c: &Context) -> Result<Option<Vec<TokenId>>> {
            Ok(c.required_key.map(|k| vec![k]))
        }
    }

    #[test]
    fn base_success_on_trivial_env() {
        let mut spec = EnvironmentSpec {
            num_contexts: 10,
            ..EnvironmentSpec::default()
        };
        spec.success.easy_base = 1.0;
        spec.archetype_mix = BTreeMap::from([(Archetype::Easy, 1.0)]);
        let e = make_environment(&spec).unwrap();
        assert_eq!(success_rate(&NoMemory, &e, &e.contexts, 1).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_trials_agree() {
        let e = env();
        let a = success_rate(&KeyOracle, &e, &e.contexts, 1).unwrap();
        let b = success_rate(&KeyOracle, &e, &e.contexts, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn key_oracle_matches_success_model() {
        let e = env();
        let m = e.spec.success;
        let expected: f64 = e
            .contexts
            .iter()
            .map(|c| match c.archetype {
                Archetype::Hard => {
                    f64::from(u8::from(m.hard_base + m.key_gain - m.distraction_per_token >= 0.5))
                }
                _ => f64::from(u8::from(c.base_success >= 0.5)),
            })
            .sum::<f64>()
            / e.contexts.len() as f64;
        assert_eq!(success_rate(&KeyOracle, &e, &e.contexts, 1).unwrap(), expected);
    }

    #[test]
    fn bins_cover_every_context() {
        let bins = difficulty_bins(&[1.0, 1.0], &[1.0, 1.0], &[true, false], 5).unwrap();
        assert_eq!(bins.iter().filter(|b| !b.empty).count(), 1);
        assert_eq!(bins[4].count, 2);
        assert_eq!(bins[4].abstain_rate, 0.5);
        let one = difficulty_bins(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0], &[true, true, false], 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].sr_improvement - 0.5).abs() < 1e-12);
        assert_eq!((bin_of(0.0, 5), bin_of(0.2, 5), bin_of(0.999, 5), bin_of(1.0, 5)), (0, 1, 4, 4));
    }

    #[test]
    fn venn_partition() {
        let v = venn_regions(&[true; 3], &[true; 3], &[true; 3]).unwrap();
        assert_eq!(v["111"], 3);
        assert_eq!(v.values().sum::<usize>(), 3);
        let v = venn_regions(&[true, false], &[false, false], &[false, true]).unwrap();
        assert_eq!((v["100"], v["001"]), (1, 1));
        assert!(venn_regions(&[true], &[], &[true]).is_err());
    }

    #[test]
    fn trap_contexts_land_in_base_only_region() {
        let e = env();
        let traps: Vec<Context> = e.contexts_of(Archetype::Trap).cloned().collect();
        assert!(!traps.is_empty());
        struct Always;
        impl MemoryProvider for Always {
            fn name(&self) -> &str {
                "always"
            }
            fn memory(&self, _: &Context) -> Result<Option<Vec<TokenId>>> {
                Ok(Some(vec![9]))
            }
        }
        let b = context_success_rates(&NoMemory, &e, &traps, 1).unwrap();
        let m = context_success_rates(&Always, &e, &traps, 1).unwrap();
        let to_bool = |v: &[f64]| v.iter().map(|&r| r >= 0.5).collect::<Vec<_>>();
        let v = venn_regions(&to_bool(&b), &to_bool(&m), &to_bool(&m)).unwrap();
        assert_eq!(v["100"], traps.len());
    }

    fn bank_with(features: Vec<Vec<f64>>) -> ExperienceBank {
        let entries = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| ExperienceEntry {
                entry_id: format!("e{i}"),
                context_id: format!("c{i}"),
                context_features: f,
                guidance_tokens: vec![i as u32],
                split_tag: SplitTag::Train,
            })
            .collect();
        ExperienceBank::new(BankHeader { feature_dim: 3, vocab_size: 8 }, entries).unwrap()
    }

    fn ctx(f: Vec<f64>) -> Context {
        Context {
            context_id: "q".into(),
            features: f,
            archetype: Archetype::Neutral,
            required_key: None,
            base_success: 0.5,
        }
    }

    #[test]
    fn retrieval_picks_nearest_and_breaks_ties_by_id() {
        let bank = bank_with(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(retrieval_baseline(&bank, &ctx(vec![0.0, 1.0, 0.0]), 1).unwrap(), vec![1]);
        assert_eq!(retrieval_baseline(&bank, &ctx(vec![1.0, 1.0, 0.0]), 1).unwrap(), vec![0]);
        // Exhaustive scan: highest dot product over unit rows.
        let q: Vec<f64> = vec![0.2, 0.3, 0.9];
        let best = (0..3usize)
            .max_by(|&a, &b| q[a].total_cmp(&q[b]))
            .unwrap();
        assert_eq!(retrieval_baseline(&bank, &ctx(q), 1).unwrap(), vec![best as u32]);
        let empty = ExperienceBank::new(bank.header, vec![]).unwrap();
        assert!(Retrieval::new(&empty).is_err());
    }

    #[test]
    fn token_usage_extremes() {
        let e = env();
        let vocab = crate::policy::Vocabulary::new(16).unwrap();
        let mut p = PolicyParameters::zeros(12, vocab);
        p.weights.bias[vocab.abstain_id() as usize] = 5.0;
        assert_eq!(token_usage(&p, &e.contexts, 16).unwrap(), 0.0);
        // Always generate token 3 exactly ten times.
        let mut p = PolicyParameters::zeros(12, vocab);
        p.weights.bias[vocab.generate_id() as usize] = 5.0;
        p.weights.bias[3] = 5.0;
        p.weights.bias[vocab.eos_id() as usize] = 4.5;
        p.weights.prefix[vocab.eos_id() as usize * vocab.size() + 3] = 0.1;
        assert_eq!(token_usage(&p, &e.contexts, 16).unwrap(), 6.0);
    }
}
