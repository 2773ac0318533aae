//! One optimization step: rollouts, the two-branch objective, and the update.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::dcs::{lambda_at, DcsSchedule};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::model::{forward_responses, log_softmax, DropSpec, GroupForward, ModelParams, TokenSequence};
use crate::rng::stream_key;
use crate::trainer::{
    alignment_kl, branch_policy_loss, clip_grad_norm, group_rollout, BranchMember, Mode, Optimizer, RolloutGroup,
    TrainConfig,
};

/// Source of the alignment teacher distribution.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    /// The uncompressed branch of the parameters being optimized, detached.
    Live,
    /// A separate parameter set held constant.
    Frozen(&'a ModelParams),
}

/// Quantities treated as constants by the objective.
#[derive(Debug, Clone, Copy)]
pub struct Detached<'a> {
    pub teacher: Teacher<'a>,
    /// Old-policy log-probabilities under the compressed context, indexed by
    /// group then member. `None` uses the current values, which is exact for
    /// a single update per rollout batch.
    pub old_compressed: Option<&'a [Vec<Vec<f64>>]>,
}

impl Detached<'_> {
    pub fn on_policy() -> Self {
        Detached {
            teacher: Teacher::Live,
            old_compressed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub uncompressed: f64,
    pub compressed: f64,
    pub alignment: f64,
    /// Reference KL summed over both branches.
    pub kl_ref: f64,
    pub clip_fraction: f64,
    /// Compressed-branch log-probabilities of the chosen tokens, by group and
    /// member (empty when the branch is off).
    pub compressed_logprobs: Vec<Vec<Vec<f64>>>,
}

/// Per-member log-probability matrices (response position by vocabulary).
fn member_logps(fwd: &GroupForward, responses: &[Vec<u32>]) -> Vec<Array2<f64>> {
    responses
        .iter()
        .enumerate()
        .map(|(m, r)| {
            let v = fwd.logits.ncols();
            let mut out = Array2::zeros((r.len(), v));
            for j in 0..r.len() {
                let row = fwd.logits_at(m, j);
                let lp = log_softmax(row.as_slice().expect("contiguous logits"));
                out.row_mut(j).assign(&ndarray::ArrayView1::from(&lp));
            }
            out
        })
        .collect()
}

fn chosen(logp: &[Array2<f64>], responses: &[Vec<u32>]) -> Vec<Vec<f64>> {
    logp.iter()
        .zip(responses)
        .map(|(lp, r)| r.iter().enumerate().map(|(j, &t)| lp[[j, t as usize]]).collect())
        .collect()
}

/// Scatters per-member response-position gradients onto the output rows of
/// a grouped forward pass.
fn scatter(fwd: &GroupForward, per_member: &[Array2<f64>], scale: f64, out: &mut Array2<f64>) {
    for (m, g) in per_member.iter().enumerate() {
        for j in 0..g.nrows() {
            let mut row = out.row_mut(fwd.row(m, j));
            row.scaled_add(scale, &g.row(j));
        }
    }
}

struct BranchEval {
    fwd: GroupForward,
    logp: Vec<Array2<f64>>,
    dlogits: Array2<f64>,
}

fn run_branch(
    params: &ModelParams,
    seq: &TokenSequence,
    responses: &[Vec<u32>],
    drop: DropSpec,
    record: bool,
) -> Result<BranchEval> {
    let fwd = forward_responses(params, seq, responses, drop, record)?;
    let logp = member_logps(&fwd, responses);
    let dlogits = Array2::zeros(fwd.logits.dim());
    Ok(BranchEval { fwd, logp, dlogits })
}

fn ref_logps(
    reference: Option<&ModelParams>,
    beta: f64,
    seq: &TokenSequence,
    responses: &[Vec<u32>],
    drop: DropSpec,
) -> Result<Option<Vec<Array2<f64>>>> {
    if beta == 0.0 {
        return Ok(None);
    }
    let reference = reference.ok_or_else(|| Error::ShapeMismatch("beta > 0 needs a reference policy".into()))?;
    let fwd = forward_responses(reference, seq, responses, drop, false)?;
    Ok(Some(member_logps(&fwd, responses)))
}

fn members<'a>(
    group: &'a RolloutGroup,
    logp: &'a [Array2<f64>],
    old: &'a [Vec<f64>],
    reference: Option<&'a [Array2<f64>]>,
) -> Vec<BranchMember<'a>> {
    group
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| BranchMember {
            tokens: &m.response,
            new_logp: logp[i].view(),
            old_logprobs: &old[i],
            ref_logp: reference.map(|r| r[i].view()),
            advantage: m.advantage,
        })
        .collect()
}

/// The composite loss `L_uncompressed + L_compressed + lambda * L_align`
/// averaged over the rollout groups, and optionally its parameter gradient.
///
/// The uncompressed branch always sees the full-window context. The
/// compressed branch reuses the same responses with history observations
/// removed before layer `drop_layer`. Reference log-probabilities of each
/// branch are taken under that branch's own context.
pub fn hcpo_objective(
    params: &ModelParams,
    reference: Option<&ModelParams>,
    agent: &Agent,
    groups: &[RolloutGroup],
    cfg: &TrainConfig,
    detached: Detached<'_>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelParams>)> {
    if groups.is_empty() {
        return Err(Error::ShapeMismatch("no rollout groups".into()));
    }
    let scale = 1.0 / groups.len() as f64;
    let lambda = cfg.effective_lambda();
    let compressed = cfg.mode.uses_compressed_branch();
    let drop = DropSpec::images(cfg.drop_layer);
    let mut out = LossBreakdown::default();
    let mut grads = want_grad.then(|| ModelParams::zeros(params.dims));
    let mut clipped_tokens = 0.0;
    let mut total_tokens = 0.0;

    for (g, group) in groups.iter().enumerate() {
        let responses = group.responses();
        let ntok: usize = responses.iter().map(Vec::len).sum();
        let seq = agent.encode(&group.context)?;
        let old_full: Vec<Vec<f64>> = group.members.iter().map(|m| m.old_logprobs.clone()).collect();

        // Uncompressed branch.
        let mut full = run_branch(params, &seq, &responses, DropSpec::none(), want_grad)?;
        let ref_full = ref_logps(reference, cfg.beta, &seq, &responses, DropSpec::none())?;
        let mut extra: Vec<BranchEval> = Vec::new();
        if cfg.mode == Mode::UniformDcsAllTau {
            let taus = agent.window + 1;
            let w = 1.0 / taus as f64;
            for tau in 0..agent.window {
                let tseq = agent.encode(&group.context.truncated(tau))?;
                let mut br = run_branch(params, &tseq, &responses, DropSpec::none(), want_grad)?;
                let old = chosen(&br.logp, &responses);
                let rf = ref_logps(reference, cfg.beta, &tseq, &responses, DropSpec::none())?;
                let l = branch_policy_loss(&members(group, &br.logp, &old, rf.as_deref()), cfg.epsilon, cfg.beta)?;
                out.uncompressed += scale * w * l.loss;
                out.kl_ref += scale * w * l.kl_ref;
                clipped_tokens += l.clip_fraction * ntok as f64;
                total_tokens += ntok as f64;
                scatter(&br.fwd, &l.dlogits, scale * w, &mut br.dlogits);
                extra.push(br);
            }
            let l = branch_policy_loss(&members(group, &full.logp, &old_full, ref_full.as_deref()), cfg.epsilon, cfg.beta)?;
            out.uncompressed += scale * w * l.loss;
            out.kl_ref += scale * w * l.kl_ref;
            clipped_tokens += l.clip_fraction * ntok as f64;
            total_tokens += ntok as f64;
            scatter(&full.fwd, &l.dlogits, scale * w, &mut full.dlogits);
        } else {
            let l = branch_policy_loss(&members(group, &full.logp, &old_full, ref_full.as_deref()), cfg.epsilon, cfg.beta)?;
            out.uncompressed += scale * l.loss;
            out.kl_ref += scale * l.kl_ref;
            clipped_tokens += l.clip_fraction * ntok as f64;
            total_tokens += ntok as f64;
            scatter(&full.fwd, &l.dlogits, scale, &mut full.dlogits);
        }

        // Compressed branch and alignment.
        if compressed {
            let mut comp = run_branch(params, &seq, &responses, drop, want_grad)?;
            let current = chosen(&comp.logp, &responses);
            let old_comp = match detached.old_compressed {
                Some(all) => all
                    .get(g)
                    .cloned()
                    .ok_or_else(|| Error::ShapeMismatch("missing old compressed log-probs".into()))?,
                None => current.clone(),
            };
            let ref_comp = ref_logps(reference, cfg.beta, &seq, &responses, drop)?;
            let l = branch_policy_loss(&members(group, &comp.logp, &old_comp, ref_comp.as_deref()), cfg.epsilon, cfg.beta)?;
            out.compressed += scale * l.loss;
            out.kl_ref += scale * l.kl_ref;
            clipped_tokens += l.clip_fraction * ntok as f64;
            total_tokens += ntok as f64;
            scatter(&comp.fwd, &l.dlogits, scale, &mut comp.dlogits);

            if lambda > 0.0 {
                let teacher = match detached.teacher {
                    Teacher::Live => full.logp.clone(),
                    Teacher::Frozen(p) => member_logps(&forward_responses(p, &seq, &responses, DropSpec::none(), false)?, &responses),
                };
                let student: Vec<ArrayView2<f64>> = comp.logp.iter().map(|a| a.view()).collect();
                let teacher: Vec<ArrayView2<f64>> = teacher.iter().map(|a| a.view()).collect();
                let al = alignment_kl(&student, &teacher)?;
                out.alignment += scale * al.loss;
                scatter(&comp.fwd, &al.dstudent, scale * lambda, &mut comp.dlogits);
            }
            out.compressed_logprobs.push(current);
            extra.push(comp);
        }

        if let Some(grads) = grads.as_mut() {
            full.fwd.backward(params, &full.dlogits, grads)?;
            for br in &extra {
                br.fwd.backward(params, &br.dlogits, grads)?;
            }
        }
    }

    out.total = out.uncompressed + out.compressed + lambda * out.alignment;
    out.clip_fraction = if total_tokens > 0.0 { clipped_tokens / total_tokens } else { 0.0 };
    if !out.total.is_finite() {
        return Err(Error::NonFiniteLoss("total loss"));
    }
    if let Some(name) = grads.as_ref().and_then(ModelParams::first_non_finite) {
        return Err(Error::NonFiniteGradient(name));
    }
    Ok((out, grads))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Sharpness of the history-length distribution; absent for the fixed
    /// full-window schedule.
    pub lambda: Option<f64>,
    pub tau_counts: Vec<usize>,
    pub tau_mean_reward: Vec<Option<f64>>,
    pub mean_reward: f64,
    pub loss: f64,
    pub loss_uncompressed: f64,
    pub loss_compressed: f64,
    pub loss_alignment: f64,
    pub kl_ref: f64,
    pub clip_fraction: f64,
    pub batch_sr: f64,
    pub short_long_ratio: Option<f64>,
    pub grad_norm: f64,
}

/// Pooled mean reward of members with `tau < N` over the mean reward of
/// members with `tau = N`; `None` when either side is empty or the
/// denominator is zero.
pub fn short_long_ratio_of(tau_counts: &[usize], tau_mean_reward: &[Option<f64>]) -> Option<f64> {
    let n = tau_counts.len().checked_sub(1)?;
    let long = tau_mean_reward.get(n).copied().flatten().filter(|_| tau_counts[n] > 0)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (c, m) in tau_counts[..n].iter().zip(&tau_mean_reward[..n]) {
        if *c > 0 {
            sum += *c as f64 * (*m)?;
            count += c;
        }
    }
    if count == 0 || long == 0.0 {
        return None;
    }
    Some(sum / count as f64 / long)
}

fn group_stats(groups: &[RolloutGroup], window: usize) -> (Vec<usize>, Vec<Option<f64>>, f64, f64) {
    let mut counts = vec![0usize; window + 1];
    let mut sums = vec![0.0; window + 1];
    let (mut total, mut success, mut n) = (0.0, 0usize, 0usize);
    for g in groups {
        for m in &g.members {
            counts[m.tau] += 1;
            sums[m.tau] += m.reward.total;
            total += m.reward.total;
            success += usize::from(m.success);
            n += 1;
        }
    }
    let means = counts
        .iter()
        .zip(&sums)
        .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
        .collect();
    (counts, means, total / n as f64, success as f64 / n as f64)
}

/// Rollouts for `batch`, the composite loss, and one optimizer step on
/// `params`. Group `b` draws from the stream `(key, "group", b)`.
#[allow(clippy::too_many_arguments)]
pub fn hcpo_step(
    params: &mut ModelParams,
    reference: &ModelParams,
    optimizer: &mut Optimizer,
    agent: &Agent,
    batch: &[(&Episode, usize)],
    cfg: &TrainConfig,
    u: usize,
    key: u64,
) -> Result<StepMetrics> {
    let mut groups = Vec::with_capacity(batch.len());
    for (b, (episode, t)) in batch.iter().enumerate() {
        let gkey = stream_key(key, &["group".into(), b.into()]);
        groups.push(group_rollout(params, agent, episode, *t, cfg, u, gkey)?);
    }
    let (loss, grads) = hcpo_objective(params, Some(reference), agent, &groups, cfg, Detached::on_policy(), true)?;
    let mut grads = grads.expect("gradient requested");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    optimizer.step(params, &grads, cfg.learning_rate);
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }

    let dcs = cfg.effective_dcs();
    let lambda = match dcs.schedule {
        DcsSchedule::Fixed => None,
        DcsSchedule::Uniform => Some(0.0),
        DcsSchedule::ExpBias => Some(lambda_at(u, cfg.steps, dcs.lambda_max, dcs.alpha)),
    };
    let (tau_counts, tau_mean_reward, mean_reward, batch_sr) = group_stats(&groups, agent.window);
    let short_long_ratio = short_long_ratio_of(&tau_counts, &tau_mean_reward);
    Ok(StepMetrics {
        step: u,
        lambda,
        tau_counts,
        tau_mean_reward,
        mean_reward,
        loss: loss.total,
        loss_uncompressed: loss.uncompressed,
        loss_compressed: loss.compressed,
        loss_alignment: loss.alignment,
        kl_ref: loss.kl_ref,
        clip_fraction: loss.clip_fraction,
        batch_sr,
        short_long_ratio,
        grad_norm,
    })
}
