//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use mempi::advantage::{
    branch_values, content_advantages, vanilla_group_advantages, AdvantageEstimator, Decoupled, Gating,
    VanillaGrpo,
};
use mempi::bank::SplitTag;
use mempi::env::{Archetype, Context, TaskOutcome};
use mempi::eval::{greedy_abstentions, success_rate, token_usage, PolicyMemory};
use mempi::policy::{MemoryOutput, PolicyParameters};
use mempi::reward::{branch_reward, length_penalty, RewardConfig};
use mempi::rollout::{structured_rollout, RolloutGroup, RolloutMode};
use mempi::runner::{self, load_config, AblationRow, RunConfig};
use mempi::stage1::{stage1_loss, stage1_loss_and_grad};
use mempi::stage2::{
    apply_update, batch_objective, mean_abstain_probability, objective_gradient, surrogate_objective,
    train_stage2, OptimizerState, Stage2Config,
};
use rand::Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Clipped-surrogate objective coded straight from token probabilities.
fn direct_grpo(
    p: &PolicyParameters,
    old: &PolicyParameters,
    reference: &PolicyParameters,
    group: &RolloutGroup,
    adv: &[f64],
    eps: f64,
    beta: f64,
) -> f64 {
    let x = &group.context.features;
    let mut total = 0.0;
    for (b, &a) in group.branches.iter().zip(adv) {
        let tokens = b.output.tokens(&p.vocab);
        let mut sum = 0.0;
        for t in 0..tokens.len() {
            let prefix = &tokens[..t];
            let pn = p.token_distribution(x, prefix).unwrap();
            let po = old.token_distribution(x, prefix).unwrap();
            let pr = reference.token_distribution(x, prefix).unwrap();
            let y = tokens[t] as usize;
            let rho = pn[y] / po[y];
            let surr = (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a);
            let kl: f64 = pn
                .iter()
                .zip(&pr)
                .filter(|(&q, _)| q > 0.0)
                .map(|(&q, &r)| q * (q / r).ln())
                .sum();
            sum += surr - beta * kl;
        }
        total += sum / tokens.len() as f64;
    }
    total / group.branches.len() as f64
}

fn c1_grpo_reduction() -> Check {
    let mut r = rng(101);
    let cfg = Stage2Config {
        rollout_mode: RolloutMode::Iid,
        ..Stage2Config::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let old = random_policy(&mut r, 4, 5, 1.0);
        let p = perturbed(&old, &mut r, 0.6);
        let reference = perturbed(&old, &mut r, 0.6);
        let ctx = random_context(&mut r, 4);
        let g_size = r.random_range(2..7);
        let g = random_group(&old, &ctx, g_size, RolloutMode::Iid, &mut r);
        let adv = VanillaGrpo.estimate(&g, cfg.eps_std).unwrap();
        let scalars = vanilla_group_advantages(&g.rewards().unwrap(), cfg.eps_std);
        let ours = surrogate_objective(&p, &old, &reference, &g, &adv, &cfg).unwrap();
        let direct = direct_grpo(&p, &old, &reference, &g, &scalars, cfg.eps_clip, cfg.beta_kl);
        worst = worst.max((ours - direct).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("1000 instances, max deviation {worst:.1e}"))
}

fn clear_of_kinks(p: &PolicyParameters, old: &PolicyParameters, groups: &[RolloutGroup], eps: f64) -> bool {
    groups.iter().flat_map(|g| g.branches.iter().map(move |b| (g, b))).all(|(g, b)| {
        let now = p.sequence_log_prob(&g.context.features, &b.output).unwrap();
        let then = old.sequence_log_prob(&g.context.features, &b.output).unwrap();
        now.iter().zip(&then).all(|(a, o)| {
            let rho = (a - o).exp();
            (rho - 1.0 + eps).abs() > 1e-3 && (rho - 1.0 - eps).abs() > 1e-3
        })
    })
}

fn c2_gradients() -> Check {
    const H: f64 = 1e-5;
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    let mut policies = 0;
    let mut params = 0;
    while policies < 24 {
        let old = random_policy(&mut r, 5, 6, 0.8);
        params = params.max(old.num_params());
        let reference = perturbed(&old, &mut r, 0.5);
        let p = perturbed(&old, &mut r, 0.3);
        let mode = if policies % 2 == 0 { RolloutMode::Structured } else { RolloutMode::Iid };
        let groups: Vec<_> = (0..3)
            .map(|_| {
                let ctx = random_context(&mut r, 5);
                random_group(&old, &ctx, 4, mode, &mut r)
            })
            .collect();
        if !clear_of_kinks(&p, &old, &groups, 0.2) {
            continue;
        }
        for beta in [0.0, 0.01] {
            let cfg = Stage2Config {
                beta_kl: beta,
                rollout_mode: mode,
                ..Stage2Config::default()
            };
            let advs: Vec<_> = groups
                .iter()
                .map(|g| match mode {
                    RolloutMode::Structured => Decoupled { gating: Gating::Gated }.estimate(g, cfg.eps_std),
                    RolloutMode::Iid => VanillaGrpo.estimate(g, cfg.eps_std),
                })
                .collect::<Result<_, _>>()
                .unwrap();
            let grad = objective_gradient(&p, &old, &reference, &groups, &advs, &cfg).unwrap();
            let fd = finite_difference(&p, H, |q| batch_objective(q, &old, &reference, &groups, &advs, &cfg).unwrap());
            worst = worst.max(relative_error(&grad, &fd));
        }
        let batch: Vec<_> = (0..4).map(|_| random_entry(&mut r, 5, 6)).collect();
        let (_, grad) = stage1_loss_and_grad(&p, &batch).unwrap();
        let fd = finite_difference(&p, H, |q| stage1_loss(q, &batch).unwrap());
        worst = worst.max(relative_error(&grad, &fd));
        policies += 1;
    }
    ensure(params <= 500, format!("{params} parameters"))?;
    ensure(worst < 1e-5, format!("max relative error {worst:e}"))?;
    Ok(format!("{policies} policies of {params} parameters, max relative error {worst:.1e}"))
}

fn c3_decomposition() -> Check {
    let mut r = rng(103);
    let cfg = RewardConfig::default();
    for i in 0..10_000 {
        let old = random_policy(&mut r, 3, 4, 1.0);
        let ctx = random_context(&mut r, 3);
        let g_size = r.random_range(2..8);
        let mut g = structured_rollout(&old, &ctx, g_size, &Default::default(), r.random()).unwrap();
        for b in &mut g.branches {
            let outcome = TaskOutcome {
                success: r.random_range(0..2),
                steps_used: 1,
            };
            b.reward = Some(branch_reward(&outcome, &b.output, &cfg).unwrap());
        }
        let rewards = g.rewards().unwrap();
        let gen = &rewards[1..];
        let v_gen = gen.iter().sum::<f64>() / gen.len() as f64;
        let values = branch_values(&g).unwrap();
        ensure(values.delta == rewards[0] - v_gen, format!("group {i}: delta"))?;
        let a_c = content_advantages(&values, 1e-6);
        let sum: f64 = a_c[1..].iter().sum();
        ensure(sum.abs() <= 1e-9, format!("group {i}: sum A_c = {sum:e}"))?;
        let vanilla = vanilla_group_advantages(gen, 1e-6);
        ensure(
            a_c[1..].iter().zip(&vanilla).all(|(a, b)| (a - b).abs() <= 1e-12),
            format!("group {i}: content vs vanilla"),
        )?;
        let adv = Decoupled { gating: Gating::Gated }.estimate(&g, 1e-6).unwrap();
        if values.delta >= 0.0 {
            let content_zero = adv.per_token.iter().all(|row| row[1..].iter().all(|&a| a == 0.0));
            ensure(content_zero, format!("group {i}: ungated content with delta {}", values.delta))?;
        }
    }
    Ok("10000 groups".into())
}

fn c4_reward_bounds() -> Check {
    let cfg = RewardConfig {
        lambda_len: 0.1,
        max_len: 256,
        similarity_weight: 0.0,
    };
    for len in 0..=256usize {
        let out = MemoryOutput::generate(vec![0; len]);
        for success in [0u8, 1] {
            let reward = branch_reward(&TaskOutcome { success, steps_used: 1 }, &out, &cfg).unwrap();
            ensure((-0.1..=1.0).contains(&reward), format!("|m| = {len}: reward {reward}"))?;
        }
    }
    let full = length_penalty(256, &cfg).unwrap();
    let half = length_penalty(128, &cfg).unwrap();
    ensure(full == -0.1 && half == -0.05, format!("penalties {full} / {half}"))?;
    ensure(length_penalty(257, &cfg).is_err(), "over-budget memory accepted")?;
    Ok("|m| in 0..=256, penalties -0.1 / -0.05".into())
}

fn c5_symmetric_init() -> Check {
    let mut r = rng(105);
    let mut p = random_policy(&mut r, 6, 8, 2.0);
    p.symmetrize_decisions();
    for i in 0..100 {
        let ctx = random_context(&mut r, 6);
        let q = p.abstain_probability(&ctx.features).unwrap();
        ensure(q == 0.5, format!("context {i}: P(abstain) = {q}"))?;
    }
    Ok("100 contexts at exactly 0.5".into())
}

fn c6_decision_sign() -> Check {
    let cfg = Stage2Config::default();
    for seed in 0..50u64 {
        let mut r = rng(1000 + seed);
        let mut p = random_policy(&mut r, 4, 5, 0.8);
        p.symmetrize_decisions();
        let ctx = random_context(&mut r, 4);
        for (r_abs, sign) in [(1.0, 1.0), (0.0, -1.0)] {
            let mut g = structured_rollout(&p, &ctx, cfg.group_size, &Default::default(), seed).unwrap();
            for (j, b) in g.branches.iter_mut().enumerate() {
                b.reward = Some(if j == 0 { r_abs } else { 1.0 - r_abs });
            }
            let adv = Decoupled { gating: Gating::Gated }.estimate(&g, cfg.eps_std).unwrap();
            let grad = objective_gradient(&p, &p, &p, &[g], &[adv], &cfg).unwrap();
            let mut q = p.clone();
            apply_update(&mut q, &grad, &mut OptimizerState::new(cfg.max_grad_norm), cfg.learning_rate);
            let before = p.abstain_probability(&ctx.features).unwrap();
            let after = q.abstain_probability(&ctx.features).unwrap();
            ensure(sign * (after - before) > 0.0, format!("seed {seed}, delta {sign}: {before} -> {after}"))?;
        }
    }
    Ok("50 seeds, both signs".into())
}

/// Everything criteria 7 to 10 read from one seeded run.
struct SeedRun {
    abstain_gap: f64,
    rows: Vec<AblationRow>,
    tokens_full: f64,
    tokens_stage1: f64,
    sr_full: f64,
    sr_stage1: f64,
    sym_100: f64,
    sym_200: f64,
    asym_100: f64,
}

fn config(seed: u64, out: &Path) -> RunConfig {
    load_config(
        None,
        &[
            ("seed".into(), seed.to_string()),
            ("out_dir".into(), serde_json::to_string(out).unwrap()),
        ],
    )
    .unwrap()
}

fn seed_run(seed: u64) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(seed, dir.path());
    runner::cmd_gen(&cfg).unwrap();
    runner::cmd_stage1(&cfg).unwrap();
    let rows = runner::cmd_ablate(&cfg).unwrap();
    let layout = cfg.layout();
    let (env, bank) = runner::load_inputs(&layout).unwrap();
    let full = PolicyParameters::load(layout.ablation_dir("none").join("policy.json")).unwrap();
    let stage1 = PolicyParameters::load(layout.stage1()).unwrap();
    let l = cfg.eval.max_content_tokens;

    let abstain_rate = |a: Archetype| {
        let cs: Vec<Context> = env.contexts_of(a).cloned().collect();
        let abs = greedy_abstentions(&full, &cs, l).unwrap();
        abs.iter().filter(|&&b| b).count() as f64 / cs.len() as f64
    };
    let all = &env.contexts;
    let sr = |p: &PolicyParameters| success_rate(&PolicyMemory::greedy("policy", p.clone(), l), &env, all, 1).unwrap();

    let history = std::fs::read_to_string(layout.ablation_dir("none").join("history.csv")).unwrap();
    let abstain: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|row| row.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let train = bank.with_tag(SplitTag::Train);
    let ids = train.context_ids();
    let pool: Vec<Context> = env.contexts.iter().filter(|c| ids.contains(c.context_id.as_str())).cloned().collect();

    let mut resolved = cfg.clone();
    resolved.propagate_seed();
    let asym = Stage2Config {
        symmetric_init: false,
        steps: 100,
        ..resolved.stage2
    };
    let (asym_policy, _) = train_stage2(&stage1, &env, &bank, &asym).unwrap();

    SeedRun {
        abstain_gap: abstain_rate(Archetype::Easy) - abstain_rate(Archetype::Hard),
        rows,
        tokens_full: token_usage(&full, all, l).unwrap(),
        tokens_stage1: token_usage(&stage1, all, l).unwrap(),
        sr_full: sr(&full),
        sr_stage1: sr(&stage1),
        sym_100: abstain[100],
        sym_200: mean_abstain_probability(&full, &pool).unwrap(),
        asym_100: mean_abstain_probability(&asym_policy, &pool).unwrap(),
    }
}

fn c7_adaptivity(runs: &[SeedRun]) -> Check {
    let gaps: Vec<String> = runs.iter().map(|s| format!("{:.0}pp", 100.0 * s.abstain_gap)).collect();
    let ok = runs.iter().filter(|s| s.abstain_gap >= 0.30).count();
    ensure(ok == runs.len(), format!("easy-hard abstention gaps {gaps:?}"))?;
    Ok(format!("easy-hard abstention gaps {gaps:?}"))
}

fn c8_ablation_order(runs: &[SeedRun]) -> Check {
    let sr = |s: &SeedRun, name: &str| s.rows.iter().find(|r| r.ablation == name).unwrap().success_rate;
    let count = |a: &str, b: &str| runs.iter().filter(|s| sr(s, a) >= sr(s, b)).count();
    let pairs = [
        ("none", "no-delta-gating"),
        ("no-delta-gating", "no-structured-rollout"),
        ("none", "unified"),
    ];
    let counts: Vec<usize> = pairs.iter().map(|(a, b)| count(a, b)).collect();
    let gap = runs.iter().map(|s| sr(s, "none") - sr(s, "no-structured-rollout")).sum::<f64>() / runs.len() as f64;
    let detail = format!("orderings held in {counts:?} of {} seeds, full vs vanilla {:.1}pp", runs.len(), 100.0 * gap);
    ensure(counts.iter().all(|&c| c >= 2) && gap >= 0.03, detail.clone())?;
    Ok(detail)
}

fn c9_dynamics(runs: &[SeedRun]) -> Check {
    let detail: Vec<String> = runs
        .iter()
        .map(|s| format!("{:.3}/{:.3}/{:.3}", s.sym_100, s.sym_200, s.asym_100))
        .collect();
    let ok = runs
        .iter()
        .all(|s| (s.sym_100 - s.sym_200).abs() <= 0.05 && (s.asym_100 - s.sym_100).abs() >= 0.10);
    ensure(ok, format!("sym@100/sym@200/asym@100 {detail:?}"))?;
    Ok(format!("sym@100/sym@200/asym@100 {detail:?}"))
}

fn c10_efficiency(runs: &[SeedRun]) -> Check {
    let detail: Vec<String> = runs
        .iter()
        .map(|s| {
            format!(
                "tokens {:.2} vs {:.2}, SR {:.3} vs {:.3}",
                s.tokens_full, s.tokens_stage1, s.sr_full, s.sr_stage1
            )
        })
        .collect();
    let ok = runs.iter().all(|s| s.tokens_full < s.tokens_stage1 && s.sr_full >= s.sr_stage1);
    ensure(ok, format!("{detail:?}"))?;
    Ok(format!("{detail:?}"))
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn c11_determinism() -> Check {
    let pipeline = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(7, dir.path());
        cfg.workers = workers;
        runner::run_pipeline(&cfg).unwrap();
        runner::cmd_ablate(&cfg).unwrap();
        let files = csv_files(dir.path());
        (dir, files)
    };
    let (_a, first) = pipeline(1);
    let (_b, again) = pipeline(1);
    let (_c, wide) = pipeline(4);
    ensure(first.len() >= 10, format!("only {} csv files", first.len()))?;
    ensure(first == again, "two runs with one worker differ")?;
    ensure(first == wide, "one and four workers differ")?;
    Ok(format!("{} csv files identical across runs and worker counts", first.len()))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, started: Instant, result: Check| {
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name}: {detail} ({secs:.1}s)");
            }
        }
    };
    let checks: [(&str, &str, fn() -> Check); 6] = [
        ("C1", "grpo reduction", c1_grpo_reduction),
        ("C2", "gradient correctness", c2_gradients),
        ("C3", "decomposition properties", c3_decomposition),
        ("C4", "reward bounds", c4_reward_bounds),
        ("C5", "symmetric initialization", c5_symmetric_init),
        ("C6", "decision sign", c6_decision_sign),
    ];
    for (id, name, f) in checks {
        let t = Instant::now();
        report(id, name, t, f());
    }

    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(seed_run).collect();
    let shared: [(&str, &str, fn(&[SeedRun]) -> Check); 4] = [
        ("C7", "adaptivity", c7_adaptivity),
        ("C8", "ablation ordering", c8_ablation_order),
        ("C9", "abstention dynamics", c9_dynamics),
        ("C10", "token efficiency", c10_efficiency),
    ];
    for (id, name, f) in shared {
        report(id, name, t, f(&runs));
    }

    let t = Instant::now();
    report("C11", "determinism", t, c11_determinism());

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
