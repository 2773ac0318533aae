//! Group-relative policy optimization with history-length sampling and a
//! compressed second branch.

mod loss;
mod optim;
mod rollout;
mod run;
mod step;

pub use loss::{
    alignment_kl, branch_policy_loss, compute_advantages, kl_from_logp, AlignmentLoss, BranchLoss, BranchMember,
    ADV_EPS,
};
pub use optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerKind};
pub use rollout::{group_rollout, Member, RolloutGroup};
pub use run::{
    read_metrics, train, warmup, EvalSummary, RunPaths, TrainOptions, TrainOutcome, TrainState, CHECKPOINT_DIR, METRICS_FILE,
};
pub use step::{hcpo_objective, hcpo_step, short_long_ratio_of, Detached, LossBreakdown, StepMetrics, Teacher};

use serde::{Deserialize, Serialize};

use crate::dcs::{DcsConfig, DcsSchedule};
use crate::error::{Error, Result};

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// History sampling, both branches, alignment KL.
    Hcpo,
    /// Fixed full window, uncompressed branch only.
    Grpo,
    /// Both branches without the alignment term.
    HcpoNoKl,
    /// Both branches with the full window for every member.
    HcpoNoDcs,
    /// Both branches with uniform history sampling.
    UniformDcs,
    /// Uniform sampling with the uncompressed loss averaged over every window
    /// length.
    UniformDcsAllTau,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Hcpo,
        Mode::Grpo,
        Mode::HcpoNoKl,
        Mode::HcpoNoDcs,
        Mode::UniformDcs,
        Mode::UniformDcsAllTau,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hcpo => "HCPO",
            Mode::Grpo => "GRPO",
            Mode::HcpoNoKl => "HCPO_NO_KL",
            Mode::HcpoNoDcs => "HCPO_NO_DCS",
            Mode::UniformDcs => "UNIFORM_DCS",
            Mode::UniformDcsAllTau => "UNIFORM_DCS_ALL_TAU",
        }
    }

    pub fn from_name(s: &str) -> Option<Mode> {
        Mode::ALL.iter().copied().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    pub fn uses_compressed_branch(self) -> bool {
        self != Mode::Grpo
    }

    /// History-length schedule actually used by this mode.
    pub fn schedule(self, configured: DcsSchedule) -> DcsSchedule {
        match self {
            Mode::Hcpo | Mode::HcpoNoKl => configured,
            Mode::Grpo | Mode::HcpoNoDcs => DcsSchedule::Fixed,
            Mode::UniformDcs | Mode::UniformDcsAllTau => DcsSchedule::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Clip range of the probability ratio.
    pub epsilon: f64,
    /// Weight of the KL to the reference policy.
    pub beta: f64,
    /// Weight of the alignment KL between branches.
    pub lambda: f64,
    /// Layer before which history observations are removed in the
    /// compressed branch.
    pub drop_layer: usize,
    pub group_size: usize,
    /// Step contexts per update.
    pub batch_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Total optimization steps.
    pub steps: usize,
    pub dcs: DcsConfig,
    /// Run seed; set from the run configuration rather than this section.
    #[serde(skip)]
    pub seed: u64,
    /// Behaviour-cloning steps on oracle responses before the first update.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Hcpo,
            epsilon: 0.2,
            beta: 0.04,
            lambda: 1.0,
            drop_layer: 2,
            group_size: 8,
            batch_size: 2,
            temperature: 1.0,
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            steps: 2000,
            dcs: DcsConfig::default(),
            seed: 0,
            warmup_steps: 2000,
            warmup_lr: 1e-3,
            warmup_batch: 8,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let fail = |m: String| Err(Error::ConfigValidation(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon = {} violates 0 < epsilon < 1", self.epsilon));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta = {} violates beta >= 0", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda = {} violates lambda >= 0", self.lambda));
        }
        if self.drop_layer > layers {
            return fail(format!("drop_layer = {} violates 0 <= k <= L = {layers}", self.drop_layer));
        }
        if self.group_size < 2 {
            return fail(format!("group_size = {} violates G >= 2", self.group_size));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature = {} violates temperature > 0", self.temperature));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0".into());
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return fail("warmup_lr must be > 0".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail("grad_clip must be >= 0".into());
        }
        if self.warmup_batch == 0 {
            return fail("warmup_batch must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1".into());
        }
        self.dcs.validate()
    }

    /// Effective alignment weight after the mode override.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::HcpoNoKl | Mode::Grpo => 0.0,
            _ => self.lambda,
        }
    }

    pub fn effective_dcs(&self) -> DcsConfig {
        DcsConfig {
            schedule: self.mode.schedule(self.dcs.schedule),
            ..self.dcs
        }
    }
}

#[cfg(test)]
mod tests;
