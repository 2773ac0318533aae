//! Which history length gives the best rollouts, per step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::ActionKind;
use crate::agent::Agent;
use crate::env::{Episode, StepContext, TaskKind};
use crate::error::{Error, Result};
use crate::model::{sample_response, DropSpec, ModelParams, PrefixCache};
use crate::reward::total_reward;
use crate::rng::{derive_rng, StreamRng};

/// Samples whose best and worst per-window mean rewards differ by less than
/// this are discarded.
pub const DISCARD_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceConfig {
    pub rollouts: usize,
    pub temperature: f64,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            rollouts: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub episode: u64,
    pub t: usize,
    pub task_kind: TaskKind,
    pub action_kind: ActionKind,
    /// Mean total reward per history length `0..=N`.
    pub mean_reward: Vec<f64>,
    /// Smallest history length reaching the highest mean reward.
    pub best_tau: usize,
    pub gap: f64,
    pub kept: bool,
    /// `mean_reward[best_tau] - mean_reward[N]` for kept samples whose best
    /// window is shorter than the full one.
    pub improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub window: usize,
    pub samples: Vec<PreferenceSample>,
    /// Kept samples per best history length.
    pub histogram: Vec<usize>,
    /// Kept samples per best history length, split by oracle action kind.
    pub histogram_by_kind: BTreeMap<ActionKind, Vec<usize>>,
    pub kept: usize,
    pub discarded: usize,
}

impl PreferenceReport {
    fn from_samples(window: usize, samples: Vec<PreferenceSample>) -> Self {
        let mut histogram = vec![0; window + 1];
        let mut by_kind: BTreeMap<ActionKind, Vec<usize>> = BTreeMap::new();
        let mut kept = 0;
        for s in samples.iter().filter(|s| s.kept) {
            histogram[s.best_tau] += 1;
            by_kind.entry(s.action_kind).or_insert_with(|| vec![0; window + 1])[s.best_tau] += 1;
            kept += 1;
        }
        let discarded = samples.len() - kept;
        PreferenceReport {
            window,
            samples,
            histogram,
            histogram_by_kind: by_kind,
            kept,
            discarded,
        }
    }

    /// Retained improvements (shorter history beating the full one).
    pub fn improvements(&self) -> Vec<f64> {
        self.samples.iter().filter_map(|s| s.improvement).collect()
    }

    /// One JSON record per sample.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for s in &self.samples {
            let line = serde_json::to_string(s).expect("sample serializes");
            writeln!(f, "{line}").map_err(io)?;
        }
        f.flush().map_err(io)
    }

    /// `kind,tau,count` rows of the kept-sample histogram, `all` first.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("kind,tau,count\n");
        for (tau, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("all,{tau},{c}\n"));
        }
        for (kind, h) in &self.histogram_by_kind {
            for (tau, c) in h.iter().enumerate() {
                out.push_str(&format!("{},{tau},{c}\n", kind.name()));
            }
        }
        out
    }
}

/// Summarizes per-window mean rewards of one sample.
pub fn classify(mean_reward: &[f64]) -> (usize, f64, bool, Option<f64>) {
    let n = mean_reward.len() - 1;
    let mut best = 0;
    for (tau, r) in mean_reward.iter().enumerate() {
        if *r > mean_reward[best] {
            best = tau;
        }
    }
    let min = mean_reward.iter().copied().fold(f64::INFINITY, f64::min);
    let gap = mean_reward[best] - min;
    let kept = gap >= DISCARD_GAP;
    let improvement = (kept && best < n).then(|| mean_reward[best] - mean_reward[n]);
    (best, gap, kept, improvement)
}

/// Preference analysis for an arbitrary sampler. `sample(ctx, rng)` returns
/// one response text; sample `s`, window `tau`, rollout `r` draws from the
/// stream `(key, "pref", s, tau)` in order.
pub fn preference_with(
    episodes: &[Episode],
    window: usize,
    cfg: &PreferenceConfig,
    key: u64,
    tags: &crate::action::ResponseTags,
    mut sample: impl FnMut(&StepContext, &mut StreamRng) -> Result<String>,
) -> Result<PreferenceReport> {
    let mut samples = Vec::new();
    for ep in episodes {
        for t in 0..ep.len() {
            let s = samples.len();
            let full = ep.step_context(t, window)?;
            let gt = ep.oracle_action(t)?;
            let mut means = Vec::with_capacity(window + 1);
            for tau in 0..=window {
                let ctx = full.truncated(tau);
                let mut rng = derive_rng(key, &["pref".into(), s.into(), tau.into()]);
                let mut sum = 0.0;
                for _ in 0..cfg.rollouts {
                    let text = sample(&ctx, &mut rng)?;
                    sum += total_reward(&text, gt, tags).total;
                }
                means.push(sum / cfg.rollouts as f64);
            }
            let (best_tau, gap, kept, improvement) = classify(&means);
            samples.push(PreferenceSample {
                episode: ep.id,
                t,
                task_kind: ep.task_kind,
                action_kind: gt.kind(),
                mean_reward: means,
                best_tau,
                gap,
                kept,
                improvement,
            });
        }
    }
    Ok(PreferenceReport::from_samples(window, samples))
}

/// Rollouts of a fixed policy under every history length for each step of
/// `episodes`.
pub fn history_preference_analysis(
    params: &ModelParams,
    agent: &Agent,
    episodes: &[Episode],
    cfg: &PreferenceConfig,
    key: u64,
) -> Result<PreferenceReport> {
    if cfg.rollouts == 0 {
        return Err(Error::ConfigValidation("rollouts must be >= 1".into()));
    }
    let mut cache_for: Option<(StepContext, PrefixCache)> = None;
    preference_with(episodes, agent.window, cfg, key, &agent.tags, |ctx, rng| {
        if cache_for.as_ref().map(|(c, _)| c != ctx).unwrap_or(true) {
            let seq = agent.encode(ctx)?;
            cache_for = Some((ctx.clone(), PrefixCache::build(params, &seq, DropSpec::none())?));
        }
        let cache = &cache_for.as_ref().expect("cache built").1;
        let tokens = sample_response(params, cache, cfg.temperature, agent.max_response(), rng)?;
        Ok(agent.render(&tokens))
    })
}
