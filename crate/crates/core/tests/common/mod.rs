#![allow(dead_code)]

use mempi::bank::{ExperienceEntry, SplitTag};
use mempi::env::{Archetype, Context};
use mempi::policy::{init_policy, PolicyParameters, Vocabulary, Weights};
use mempi::rng::{self, StreamRng};
use mempi::rollout::{rollout, RolloutGroup, RolloutMode};
use mempi::policy::SamplingParams;
use rand::Rng;

pub fn rng(seed: u64) -> StreamRng {
    rng::stream(seed, &[0xfeed])
}

/// Random policy with every parameter block perturbed.
pub fn random_policy(r: &mut StreamRng, feature_dim: usize, content: usize, scale: f64) -> PolicyParameters {
    let mut p = init_policy(feature_dim, Vocabulary::new(content).unwrap(), scale, r.random()).unwrap();
    for w in p.weights.iter_mut() {
        *w += scale * (r.random::<f64>() - 0.5);
    }
    p.stage = 1;
    p
}

pub fn perturbed(p: &PolicyParameters, r: &mut StreamRng, scale: f64) -> PolicyParameters {
    let mut q = p.clone();
    for w in q.weights.iter_mut() {
        *w += scale * (r.random::<f64>() - 0.5);
    }
    q
}

pub fn random_context(r: &mut StreamRng, feature_dim: usize) -> Context {
    Context {
        context_id: format!("c{}", r.random::<u32>()),
        features: (0..feature_dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        archetype: Archetype::Neutral,
        required_key: None,
        base_success: 0.5,
    }
}

pub fn random_entry(r: &mut StreamRng, feature_dim: usize, content: usize) -> ExperienceEntry {
    let len = r.random_range(1..5);
    ExperienceEntry {
        entry_id: format!("e{}", r.random::<u32>()),
        context_id: "c".into(),
        context_features: (0..feature_dim).map(|_| r.random::<f64>() * 2.0 - 1.0).collect(),
        guidance_tokens: (0..len).map(|_| r.random_range(0..content as u32)).collect(),
        split_tag: SplitTag::Train,
    }
}

/// Sampled group with rewards filled in: binary success plus a small
/// length-dependent term.
pub fn random_group(
    policy_old: &PolicyParameters,
    ctx: &Context,
    group_size: usize,
    mode: RolloutMode,
    r: &mut StreamRng,
) -> RolloutGroup {
    let params = SamplingParams {
        max_content_tokens: 5,
        ..SamplingParams::default()
    };
    let mut g = rollout(mode, policy_old, ctx, group_size, &params, r.random()).unwrap();
    for b in &mut g.branches {
        let success = f64::from(r.random_bool(0.5));
        let pen = b.output.memory().map_or(0.0, |m| -0.1 * m.len() as f64 / 5.0);
        b.reward = Some(success + pen);
    }
    g
}

/// Central differences of `f` around `p`.
pub fn finite_difference(p: &PolicyParameters, h: f64, f: impl Fn(&PolicyParameters) -> f64) -> Weights {
    let mut out = Weights::zeros_like(&p.weights);
    let mut q = p.clone();
    for i in 0..p.weights.len() {
        let x = p.weights.get_flat(i);
        *q.weights.flat_mut(i) = x + h;
        let fp = f(&q);
        *q.weights.flat_mut(i) = x - h;
        let fm = f(&q);
        *q.weights.flat_mut(i) = x;
        *out.flat_mut(i) = (fp - fm) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Weights, b: &Weights) -> f64 {
    let mut d = a.clone();
    d.add_scaled(b, -1.0);
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        d.norm() / scale
    }
}
