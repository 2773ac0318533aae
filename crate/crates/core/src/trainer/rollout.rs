//! Group rollouts with per-member history lengths.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use crate::agent::Agent;
use crate::dcs::sample_tau;
use crate::env::{Episode, StepContext};
use crate::error::Result;
use crate::eval::judge_response;
use crate::model::{forward_responses, response_logprobs, sample_response, DropSpec, ModelParams, PrefixCache};
use crate::reward::{total_reward, RewardBreakdown};
use crate::rng::derive_rng;
use crate::trainer::{compute_advantages, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub tau: usize,
    pub response: Vec<u32>,
    pub text: String,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    /// Step success of the response (kind and value both correct).
    pub success: bool,
    /// Old-policy log-probabilities of `response` under the full context.
    pub old_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    /// Full-window context; member `tau`s index truncations of it.
    pub context: StepContext,
    pub members: Vec<Member>,
}

impl RolloutGroup {
    pub fn responses(&self) -> Vec<Vec<u32>> {
        self.members.iter().map(|m| m.response.clone()).collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.reward.total).collect()
    }
}

/// Samples `G` responses for step `t` of `episode`. Member `i` draws its
/// history length and its tokens from the stream `(key, "member", i)`;
/// responses are sampled from the truncated context without compression and
/// re-scored under the full context for the old-policy log-probabilities.
#[allow(clippy::too_many_arguments)]
pub fn group_rollout(
    params_old: &ModelParams,
    agent: &Agent,
    episode: &Episode,
    t: usize,
    cfg: &TrainConfig,
    u: usize,
    key: u64,
) -> Result<RolloutGroup> {
    let window = agent.window;
    let full = episode.step_context(t, window)?;
    let gt = episode.oracle_action(t)?;
    let pmf = cfg.effective_dcs().pmf(window, u, cfg.steps);

    let mut caches: BTreeMap<usize, PrefixCache> = BTreeMap::new();
    let mut members = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let mut rng = derive_rng(key, &["member".into(), i.into()]);
        let tau = sample_tau(&pmf, &mut rng)?;
        let cache = match caches.entry(tau) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let seq = agent.encode(&full.truncated(tau))?;
                e.insert(PrefixCache::build(params_old, &seq, DropSpec::none())?)
            }
        };
        let response = sample_response(params_old, cache, cfg.temperature, agent.max_response(), &mut rng)?;
        let text = agent.render(&response);
        let reward = total_reward(&text, gt, &agent.tags);
        let success = judge_response(&text, gt, &agent.tags, &agent.grid).success;
        members.push(Member {
            tau,
            response,
            text,
            reward,
            advantage: 0.0,
            success,
            old_logprobs: Vec::new(),
        });
    }

    let advantages = compute_advantages(&members.iter().map(|m| m.reward.total).collect::<Vec<_>>());
    let responses: Vec<Vec<u32>> = members.iter().map(|m| m.response.clone()).collect();
    let seq = agent.encode(&full)?;
    let fwd = forward_responses(params_old, &seq, &responses, DropSpec::none(), false)?;
    for (i, (m, a)) in members.iter_mut().zip(advantages).enumerate() {
        m.advantage = a;
        m.old_logprobs = response_logprobs(&fwd, i, &m.response);
    }
    Ok(RolloutGroup { context: full, members })
}
