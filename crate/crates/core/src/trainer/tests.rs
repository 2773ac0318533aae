use super::*;
use crate::action::ResponseTags;
use crate::agent::Agent;
use crate::config::RunConfig;
use crate::env::{generate_episode, Episode, GridSpec, TaskKind};
use crate::error::Error;
use crate::model::{ModelConfig, ModelParams};
use rand::Rng;

fn small_agent() -> Agent {
    Agent::new(
        GridSpec::default(),
        ResponseTags::default(),
        2,
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            max_response: 24,
        },
    )
}

fn episode(kind: TaskKind, seed: u64) -> Episode {
    generate_episode(seed, kind, &GridSpec::default()).unwrap()
}

/// Old parameters plus a small perturbation, so new and old policies differ.
fn nudged(p: &ModelParams, seed: u64, scale: f64) -> ModelParams {
    let noise = ModelParams::init(p.dims, seed).unwrap();
    let mut q = p.clone();
    q.add_scaled(&noise, scale);
    q
}

fn test_cfg(mode: Mode, drop_layer: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        mode,
        drop_layer,
        lambda,
        group_size: 4,
        steps: 10,
        ..TrainConfig::default()
    }
}

/// Two rollout groups with fixed, non-degenerate advantages.
fn groups(agent: &Agent, old: &ModelParams, cfg: &TrainConfig) -> Vec<RolloutGroup> {
    let eps = [episode(TaskKind::Recall2, 3), episode(TaskKind::Copy2, 4)];
    let adv = [1.2, -0.7, 0.4, -0.9];
    eps.iter()
        .enumerate()
        .map(|(i, ep)| {
            let t = 2.min(ep.len() - 1);
            let mut g = group_rollout(old, agent, ep, t, cfg, 5, 100 + i as u64).unwrap();
            for (m, a) in g.members.iter_mut().zip(adv.iter().cycle().skip(i)) {
                m.advantage = *a;
            }
            g
        })
        .collect()
}

fn old_logprobs(groups: &[RolloutGroup]) -> Vec<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| g.members.iter().map(|m| m.old_logprobs.clone()).collect())
        .collect()
}

#[test]
fn mode_names_round_trip() {
    for m in Mode::ALL {
        assert_eq!(Mode::from_name(m.name()), Some(m));
        assert_eq!(Mode::from_name(&m.name().to_lowercase()), Some(m));
    }
    assert_eq!(Mode::from_name("PPO"), None);
}

#[test]
fn mode_overrides() {
    let mut c = TrainConfig::default();
    assert_eq!(c.effective_lambda(), 1.0);
    c.mode = Mode::HcpoNoKl;
    assert_eq!(c.effective_lambda(), 0.0);
    c.mode = Mode::Grpo;
    assert_eq!(c.effective_lambda(), 0.0);
    assert_eq!(c.effective_dcs().schedule, crate::dcs::DcsSchedule::Fixed);
    c.mode = Mode::UniformDcs;
    assert_eq!(c.effective_dcs().schedule, crate::dcs::DcsSchedule::Uniform);
}

#[test]
fn config_validation_bounds() {
    let ok = TrainConfig::default();
    assert!(ok.validate(4).is_ok());
    let bad = |c: TrainConfig| matches!(c.validate(4), Err(Error::ConfigValidation(_)));
    assert!(bad(TrainConfig { epsilon: 0.0, ..ok.clone() }));
    assert!(bad(TrainConfig { epsilon: 1.0, ..ok.clone() }));
    assert!(bad(TrainConfig { beta: -0.1, ..ok.clone() }));
    assert!(bad(TrainConfig { lambda: -1.0, ..ok.clone() }));
    assert!(bad(TrainConfig { group_size: 1, ..ok.clone() }));
    assert!(bad(TrainConfig { drop_layer: 5, ..ok.clone() }));
    assert!(TrainConfig { drop_layer: 4, ..ok.clone() }.validate(4).is_ok());
    assert!(TrainConfig { drop_layer: 0, ..ok }.validate(4).is_ok());
}

#[test]
fn rollout_is_deterministic_in_key() {
    let agent = small_agent();
    let p = ModelParams::init(agent.dims(), 1).unwrap();
    let cfg = test_cfg(Mode::Hcpo, 1, 1.0);
    let ep = episode(TaskKind::Recall1, 9);
    let a = group_rollout(&p, &agent, &ep, 1, &cfg, 3, 77).unwrap();
    let b = group_rollout(&p, &agent, &ep, 1, &cfg, 3, 77).unwrap();
    assert_eq!(a.responses(), b.responses());
    assert_eq!(a.members.len(), 4);
    let c = group_rollout(&p, &agent, &ep, 1, &cfg, 3, 78).unwrap();
    assert_ne!(a.responses(), c.responses());
}

#[test]
fn rollout_old_logprobs_use_full_context() {
    let agent = small_agent();
    let p = ModelParams::init(agent.dims(), 2).unwrap();
    let cfg = TrainConfig {
        mode: Mode::UniformDcs,
        group_size: 12,
        ..TrainConfig::default()
    };
    let ep = episode(TaskKind::Recall2, 5);
    let g = group_rollout(&p, &agent, &ep, 2, &cfg, 0, 1).unwrap();
    assert!(g.members.iter().any(|m| m.tau < 2));
    assert_eq!(g.context.history.len(), 2);
    let seq = agent.encode(&g.context).unwrap();
    for m in &g.members {
        let lp = crate::model::logprob_of(&p, &seq, &m.response, crate::model::DropSpec::none()).unwrap();
        assert_eq!(lp, m.old_logprobs);
    }
    let rewards = g.rewards();
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    if rewards.iter().any(|r| (r - mean).abs() > 1e-12) {
        let am = g.members.iter().map(|m| m.advantage).sum::<f64>() / 12.0;
        assert!(am.abs() < 1e-9);
    }
}

#[test]
fn fixed_schedules_use_full_window() {
    let agent = small_agent();
    let p = ModelParams::init(agent.dims(), 3).unwrap();
    let ep = episode(TaskKind::Copy2, 2);
    for mode in [Mode::Grpo, Mode::HcpoNoDcs] {
        let cfg = TrainConfig {
            mode,
            group_size: 16,
            ..TrainConfig::default()
        };
        let g = group_rollout(&p, &agent, &ep, 2, &cfg, 0, 4).unwrap();
        assert!(g.members.iter().all(|m| m.tau == 2), "{}", mode.name());
    }
}

#[test]
fn grpo_has_no_compressed_branch() {
    let agent = small_agent();
    let old = ModelParams::init(agent.dims(), 4).unwrap();
    let p = nudged(&old, 40, 0.05);
    let cfg = test_cfg(Mode::Grpo, 1, 1.0);
    let gs = groups(&agent, &old, &cfg);
    let (loss, _) = hcpo_objective(&p, Some(&old), &agent, &gs, &cfg, Detached::on_policy(), false).unwrap();
    assert_eq!(loss.compressed, 0.0);
    assert_eq!(loss.alignment, 0.0);
    assert!(loss.compressed_logprobs.is_empty());
    assert_eq!(loss.total, loss.uncompressed);
    assert!(loss.uncompressed != 0.0);
}

#[test]
fn drop_at_last_layer_doubles_the_uncompressed_loss() {
    let agent = small_agent();
    let old = ModelParams::init(agent.dims(), 5).unwrap();
    let p = nudged(&old, 50, 0.05);
    let reference = nudged(&old, 51, 0.05);
    for mode in [Mode::Hcpo, Mode::HcpoNoKl] {
        let cfg = test_cfg(mode, 2, 0.0);
        let gs = groups(&agent, &old, &cfg);
        let old_c = old_logprobs(&gs);
        let det = Detached {
            teacher: Teacher::Live,
            old_compressed: Some(&old_c),
        };
        let (loss, _) = hcpo_objective(&p, Some(&reference), &agent, &gs, &cfg, det, false).unwrap();
        assert!(loss.uncompressed.abs() > 1e-6);
        assert!((loss.compressed - loss.uncompressed).abs() <= 1e-12);
        assert!((loss.total - 2.0 * loss.uncompressed).abs() <= 1e-12);
    }
    let cfg = test_cfg(Mode::Hcpo, 2, 1.0);
    let gs = groups(&agent, &old, &cfg);
    let (loss, _) = hcpo_objective(&p, Some(&reference), &agent, &gs, &cfg, Detached::on_policy(), false).unwrap();
    assert!(loss.alignment.abs() <= 1e-10);
}

#[test]
fn frozen_teacher_gives_identical_gradients() {
    let agent = small_agent();
    let old = ModelParams::init(agent.dims(), 6).unwrap();
    let p = nudged(&old, 60, 0.05);
    let cfg = test_cfg(Mode::Hcpo, 1, 1.0);
    let gs = groups(&agent, &old, &cfg);
    let (la, ga) = hcpo_objective(&p, Some(&old), &agent, &gs, &cfg, Detached::on_policy(), true).unwrap();
    let frozen = p.clone();
    let det = Detached {
        teacher: Teacher::Frozen(&frozen),
        old_compressed: None,
    };
    let (lb, gb) = hcpo_objective(&p, Some(&old), &agent, &gs, &cfg, det, true).unwrap();
    assert!(la.alignment > 0.0);
    assert_eq!(la.total, lb.total);
    assert!(ga.unwrap().max_abs_diff(&gb.unwrap()) <= 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let agent = small_agent();
    let old = ModelParams::init(agent.dims(), 7).unwrap();
    let p = nudged(&old, 70, 0.03);
    let reference = nudged(&old, 71, 0.03);
    for mode in [Mode::Hcpo, Mode::HcpoNoKl] {
        let cfg = test_cfg(mode, 1, 0.7);
        let gs = groups(&agent, &old, &cfg);
        let (loss0, _) = hcpo_objective(&p, Some(&reference), &agent, &gs, &cfg, Detached::on_policy(), false).unwrap();
        let old_c = loss0.compressed_logprobs.clone();
        let teacher = p.clone();
        let det = Detached {
            teacher: Teacher::Frozen(&teacher),
            old_compressed: Some(&old_c),
        };
        let (loss, g) = hcpo_objective(&p, Some(&reference), &agent, &gs, &cfg, det, true).unwrap();
        assert!(loss.clip_fraction < 1.0);
        let g = g.unwrap();
        let names: Vec<(String, usize)> = g.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
        let mut rng = crate::rng!(8, "fd");
        for _ in 0..50 {
            let ti = rng.gen_range(0..names.len());
            let ci = rng.gen_range(0..names[ti].1);
            let analytic = g.tensors()[ti].data[ci];
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.tensors_mut()[ti].data[ci] += delta;
                hcpo_objective(&q, Some(&reference), &agent, &gs, &cfg, det, false).unwrap().0.total
            };
            let h = 1e-5;
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(err <= 1e-4, "{} {} [{ci}]: {analytic} vs {numeric}", mode.name(), names[ti].0);
        }
    }
}

#[test]
fn short_long_ratio_examples() {
    let r = short_long_ratio_of(&[2, 2, 4], &[Some(0.6), Some(1.0), Some(1.6)]).unwrap();
    assert!((r - 0.5).abs() < 1e-12);
    assert_eq!(short_long_ratio_of(&[0, 0, 4], &[None, None, Some(1.0)]), None);
    assert_eq!(short_long_ratio_of(&[3, 1, 0], &[Some(1.0), Some(1.0), None]), None);
}

fn tiny_run(seed: u64, steps: usize) -> RunConfig {
    let mut run = RunConfig {
        seed,
        ..RunConfig::default()
    };
    run.model = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        max_response: 24,
    };
    run.env.train_episodes = 12;
    run.env.eval_episodes = 4;
    run.train.steps = steps;
    run.train.warmup_steps = 3;
    run.train.group_size = 4;
    run.train.checkpoint_every = 2;
    run.train.drop_layer = 1;
    run.eval.drop_layer = 1;
    run.eval.probe_ks = vec![0, 1, 2];
    run
}

#[test]
fn single_step_run_writes_one_record_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&tiny_run(1, 1), &out, &TrainOptions::default()).unwrap();
    assert_eq!(read_metrics(&o.paths.metrics()).unwrap().len(), 1);
    assert_eq!(o.paths.list_checkpoints().unwrap().len(), 1);
    assert!(o.paths.eval_summary().exists());
    assert!(o.paths.config().exists());
    let err = train(&tiny_run(1, 1), &out, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::RunDirExists(_)));
    let forced = TrainOptions {
        force: true,
        ..TrainOptions::default()
    };
    assert!(train(&tiny_run(1, 1), &out, &forced).is_ok());
}

#[test]
fn runs_are_reproducible_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let run = tiny_run(2, 5);
    let skip = TrainOptions {
        skip_eval: true,
        ..TrainOptions::default()
    };
    let oa = train(&run, &a, &skip).unwrap();
    let ob = train(&run, &b, &skip).unwrap();
    let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&oa.paths.metrics()), bytes(&ob.paths.metrics()));
    assert_eq!(bytes(&oa.paths.checkpoint(5)), bytes(&ob.paths.checkpoint(5)));

    // Interrupt after step 3; the last checkpoint is step 2, so resuming
    // replays step 3 and drops its stale metrics record.
    let partial = TrainOptions {
        stop_after: Some(3),
        skip_eval: true,
        ..TrainOptions::default()
    };
    train(&run, &c, &partial).unwrap();
    let resume = TrainOptions {
        resume: true,
        skip_eval: true,
        ..TrainOptions::default()
    };
    let oc = train(&run, &c, &resume).unwrap();
    assert_eq!(oc.state, oa.state);
    assert_eq!(bytes(&oa.paths.metrics()), bytes(&oc.paths.metrics()));
    assert_eq!(bytes(&oa.paths.checkpoint(5)), bytes(&oc.paths.checkpoint(5)));
}

#[test]
fn different_seeds_diverge() {
    let dir = tempfile::tempdir().unwrap();
    let skip = TrainOptions {
        skip_eval: true,
        ..TrainOptions::default()
    };
    let a = train(&tiny_run(3, 2), &dir.path().join("a"), &skip).unwrap();
    let b = train(&tiny_run(4, 2), &dir.path().join("b"), &skip).unwrap();
    assert!(a.state.policy.max_abs_diff(&b.state.policy) > 0.0);
}
