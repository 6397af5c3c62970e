mod common;

use common::*;
use mempi::advantage::{AdvantageEstimator, Decoupled, Gating, VanillaGrpo};
use mempi::rollout::RolloutMode;
use mempi::stage1::{stage1_loss, stage1_loss_and_grad};
use mempi::stage2::{batch_objective, objective_gradient, Stage2Config};
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

#[test]
fn log_prob_gradients_match_finite_differences() {
    let mut r = rng(1);
    for _ in 0..10 {
        let p = random_policy(&mut r, 4, 5, 0.8);
        let ctx = random_context(&mut r, 4);
        let g = random_group(&p, &ctx, 3, RolloutMode::Iid, &mut r);
        for b in &g.branches {
            let analytic = p.grad_log_prob(&ctx.features, &b.output).unwrap();
            for (t, a) in analytic.iter().enumerate() {
                let fd = finite_difference(&p, H, |q| q.sequence_log_prob(&ctx.features, &b.output).unwrap()[t]);
                assert!(relative_error(a, &fd) < TOL);
            }
        }
    }
}

#[test]
fn stage1_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for _ in 0..10 {
        let p = random_policy(&mut r, 5, 6, 0.8);
        let batch: Vec<_> = (0..4).map(|_| random_entry(&mut r, 5, 6)).collect();
        let (loss, grad) = stage1_loss_and_grad(&p, &batch).unwrap();
        assert!((loss - stage1_loss(&p, &batch).unwrap()).abs() < 1e-12);
        let fd = finite_difference(&p, H, |q| stage1_loss(q, &batch).unwrap());
        let err = relative_error(&grad, &fd);
        assert!(err < TOL, "relative error {err}");
    }
}

fn away_from_kinks(
    p: &mempi::policy::PolicyParameters,
    old: &mempi::policy::PolicyParameters,
    groups: &[mempi::rollout::RolloutGroup],
    eps: f64,
) -> bool {
    groups.iter().all(|g| {
        g.branches.iter().all(|b| {
            let now = p.sequence_log_prob(&g.context.features, &b.output).unwrap();
            let then = old.sequence_log_prob(&g.context.features, &b.output).unwrap();
            now.iter().zip(&then).all(|(a, o)| {
                let rho = (a - o).exp();
                (rho - (1.0 - eps)).abs() > 1e-3 && (rho - (1.0 + eps)).abs() > 1e-3
            })
        })
    })
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let mut checked = 0;
    while checked < 12 {
        let mode = if checked % 2 == 0 { RolloutMode::Structured } else { RolloutMode::Iid };
        let cfg = Stage2Config {
            beta_kl: if checked % 3 == 0 { 0.0 } else { 0.01 },
            rollout_mode: mode,
            ..Stage2Config::default()
        };
        let old = random_policy(&mut r, 4, 5, 0.8);
        let reference = perturbed(&old, &mut r, 0.5);
        let p = perturbed(&old, &mut r, 0.3);
        let groups: Vec<_> = (0..3)
            .map(|_| {
                let ctx = random_context(&mut r, 4);
                random_group(&old, &ctx, 4, mode, &mut r)
            })
            .collect();
        if !away_from_kinks(&p, &old, &groups, cfg.eps_clip) {
            continue;
        }
        let advs: Vec<_> = groups
            .iter()
            .map(|g| match mode {
                RolloutMode::Structured => {
                    let gating = if r.random_bool(0.5) { Gating::Gated } else { Gating::NaiveSum };
                    Decoupled { gating }.estimate(g, cfg.eps_std).unwrap()
                }
                RolloutMode::Iid => VanillaGrpo.estimate(g, cfg.eps_std).unwrap(),
            })
            .collect();
        let grad = objective_gradient(&p, &old, &reference, &groups, &advs, &cfg).unwrap();
        let fd = finite_difference(&p, H, |q| batch_objective(q, &old, &reference, &groups, &advs, &cfg).unwrap());
        let err = relative_error(&grad, &fd);
        assert!(err < TOL, "relative error {err}");
        checked += 1;
    }
}

#[test]
fn kl_only_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let cfg = Stage2Config { beta_kl: 1.0, ..Stage2Config::default() };
    for _ in 0..5 {
        let old = random_policy(&mut r, 3, 4, 1.0);
        let reference = perturbed(&old, &mut r, 1.0);
        let ctx = random_context(&mut r, 3);
        let g = random_group(&old, &ctx, 3, RolloutMode::Structured, &mut r);
        let mut adv = Decoupled { gating: Gating::Gated }.estimate(&g, 1e-6).unwrap();
        for a in adv.per_token.iter_mut().flatten() {
            *a = 0.0;
        }
        let groups = [g];
        let advs = [adv];
        let grad = objective_gradient(&old, &old, &reference, &groups, &advs, &cfg).unwrap();
        let fd = finite_difference(&old, H, |q| batch_objective(q, &old, &reference, &groups, &advs, &cfg).unwrap());
        assert!(relative_error(&grad, &fd) < TOL);
    }
}
