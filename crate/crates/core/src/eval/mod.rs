//! Step-level evaluation, the layer-wise token-drop sweep, the history-length
//! preference analysis, and the short-vs-long reward ratio.

mod preference;
mod sweep;

pub use preference::{
    classify, history_preference_analysis, preference_with, PreferenceConfig, PreferenceReport, PreferenceSample,
    DISCARD_GAP,
};
pub use sweep::{layer_drop_sweep, DropMode, SweepRow, SweepTable};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::action::{find_action_block, parse_action, Action, ResponseTags, ValueClass};
use crate::agent::Agent;
use crate::env::{Episode, GridSpec, StepContext, TaskKind};
use crate::error::Result;
use crate::model::{flops_estimate, token_counts, DropSpec, ModelParams};
use crate::reward::token_f1;
use crate::reward::TEXT_F1_THRESHOLD;
use crate::trainer::{short_long_ratio_of, StepMetrics};

/// Outcome of one predicted response against the oracle action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepJudgement {
    pub parsed: bool,
    pub type_ok: bool,
    /// Whether the predicted point falls inside the target cell; `None` when
    /// the oracle action has no point.
    pub grounded: Option<bool>,
    pub success: bool,
}

/// Judges a response. Clicks are grounded when they land in the oracle
/// target's cell; text values need token F1 above 0.5; directions must match
/// exactly; kinds without a value succeed on the kind alone.
pub fn judge_response(text: &str, gt: &Action, tags: &ResponseTags, grid: &GridSpec) -> StepJudgement {
    let point_gt = gt.point();
    let Some(pred) = find_action_block(text, tags).and_then(|b| parse_action(b).ok()) else {
        return StepJudgement {
            parsed: false,
            type_ok: false,
            grounded: point_gt.map(|_| false),
            success: false,
        };
    };
    let type_ok = pred.kind() == gt.kind();
    let grounded = point_gt.map(|g| match pred.point() {
        Some(p) if type_ok => grid.cell_of(&p) == grid.cell_of(&g),
        _ => false,
    });
    let value_ok = match gt.kind().value_class() {
        ValueClass::Point => grounded == Some(true),
        ValueClass::Text => token_f1(pred.text().unwrap_or_default(), gt.text().unwrap_or_default()) > TEXT_F1_THRESHOLD,
        ValueClass::Direction => pred == *gt,
        ValueClass::None => true,
    };
    StepJudgement {
        parsed: true,
        type_ok,
        grounded,
        success: type_ok && value_ok,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n_steps: usize,
    pub type_ok: usize,
    pub n_grounding: usize,
    pub grounded: usize,
    pub success: usize,
}

impl Tally {
    pub fn add(&mut self, j: &StepJudgement) {
        self.n_steps += 1;
        self.type_ok += usize::from(j.type_ok);
        self.success += usize::from(j.success);
        if let Some(g) = j.grounded {
            self.n_grounding += 1;
            self.grounded += usize::from(g);
        }
    }
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub type_acc: f64,
    pub grounding_acc: f64,
    pub step_sr: f64,
    pub n_steps: usize,
    pub n_grounding_steps: usize,
    pub drop: DropSpec,
    /// History window given to the policy.
    pub window: usize,
    /// Mean rows per layer over the evaluated contexts.
    pub mean_tokens_per_layer: Vec<f64>,
    pub mean_tokens_full: f64,
    /// `1 - flops(drop) / flops(no drop)` summed over the evaluated contexts.
    pub flops_reduction: f64,
    /// Step SR per task kind.
    pub sr_by_task: BTreeMap<TaskKind, f64>,
    /// Step SR on the steps whose oracle action depends on history.
    pub history_step_sr: f64,
}

impl EvalReport {
    fn from_breakdown(b: &Breakdown, drop: DropSpec, window: usize) -> Self {
        let t = &b.all;
        EvalReport {
            type_acc: frac(t.type_ok, t.n_steps),
            grounding_acc: frac(t.grounded, t.n_grounding),
            step_sr: frac(t.success, t.n_steps),
            n_steps: t.n_steps,
            n_grounding_steps: t.n_grounding,
            drop,
            window,
            mean_tokens_per_layer: Vec::new(),
            mean_tokens_full: 0.0,
            flops_reduction: 0.0,
            sr_by_task: b.by_task.iter().map(|(k, t)| (*k, frac(t.success, t.n_steps))).collect(),
            history_step_sr: frac(b.history_steps.success, b.history_steps.n_steps),
        }
    }
}

/// Tallies over all steps, per task kind, and over the steps that need
/// history.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub all: Tally,
    pub by_task: BTreeMap<TaskKind, Tally>,
    pub history_steps: Tally,
}

/// Runs `policy` on every step of `episodes` with `window` history steps and
/// tallies the judgements.
pub fn score_breakdown(
    episodes: &[Episode],
    window: usize,
    tags: &ResponseTags,
    grid: &GridSpec,
    mut policy: impl FnMut(&Episode, usize, &StepContext) -> Result<String>,
) -> Result<Breakdown> {
    let mut out = Breakdown::default();
    for ep in episodes {
        for t in 0..ep.len() {
            let ctx = ep.step_context(t, window)?;
            let text = policy(ep, t, &ctx)?;
            let j = judge_response(&text, ep.oracle_action(t)?, tags, grid);
            out.all.add(&j);
            out.by_task.entry(ep.task_kind).or_default().add(&j);
            if ep.history_step == Some(t) {
                out.history_steps.add(&j);
            }
        }
    }
    Ok(out)
}

/// [`score_breakdown`] reduced to the overall tally.
pub fn score_policy(
    episodes: &[Episode],
    window: usize,
    tags: &ResponseTags,
    grid: &GridSpec,
    policy: impl FnMut(&Episode, usize, &StepContext) -> Result<String>,
) -> Result<Tally> {
    Ok(score_breakdown(episodes, window, tags, grid, policy)?.all)
}

/// Greedy evaluation with the agent's full history window.
pub fn evaluate(params: &ModelParams, agent: &Agent, episodes: &[Episode], drop: DropSpec) -> Result<EvalReport> {
    evaluate_window(params, agent, episodes, drop, agent.window)
}

/// Greedy evaluation with the history cut to `window` steps.
pub fn evaluate_window(
    params: &ModelParams,
    agent: &Agent,
    episodes: &[Episode],
    drop: DropSpec,
    window: usize,
) -> Result<EvalReport> {
    let dims = params.dims;
    let (mut layer_sum, mut full_sum) = (vec![0.0; dims.layers], 0.0);
    let (mut flops_full, mut flops_drop) = (0u128, 0u128);
    let tally = score_breakdown(episodes, window, &agent.tags, &agent.grid, |_, _, ctx| {
        let seq = agent.encode(ctx)?;
        let counts = token_counts(&seq, drop, dims.layers);
        let full = vec![seq.len(); dims.layers];
        for (s, c) in layer_sum.iter_mut().zip(&counts) {
            *s += *c as f64;
        }
        full_sum += seq.len() as f64;
        flops_full += u128::from(flops_estimate(dims.d_model, dims.d_ff, &full));
        flops_drop += u128::from(flops_estimate(dims.d_model, dims.d_ff, &counts));
        agent.act_greedy(params, ctx, drop)
    })?;
    let n = tally.all.n_steps.max(1) as f64;
    let mut report = EvalReport::from_breakdown(&tally, drop, window);
    report.mean_tokens_per_layer = layer_sum.iter().map(|s| s / n).collect();
    report.mean_tokens_full = full_sum / n;
    report.flops_reduction = if flops_full == 0 {
        0.0
    } else {
        1.0 - flops_drop as f64 / flops_full as f64
    };
    Ok(report)
}

/// Short-vs-long reward ratio for every metrics record; `None` where the
/// step had no members on one side.
pub fn short_long_ratio(metrics: &[StepMetrics]) -> Vec<Option<f64>> {
    metrics
        .iter()
        .map(|m| short_long_ratio_of(&m.tau_counts, &m.tau_mean_reward))
        .collect()
}
