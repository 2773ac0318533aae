//! Run directories: warm start, the optimization loop, checkpoints, the
//! metrics log, resume, and the closing evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::config::RunConfig;
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{
    forward_responses, load_checkpoint, save_checkpoint, softmax, Checkpoint, DropSpec, ModelParams,
};
use crate::rng::{derive_rng, stream_key};
use crate::trainer::{clip_grad_norm, hcpo_step, Optimizer, OptimizerKind, StepMetrics, TrainConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const CONFIG_FILE: &str = "config.toml";
const EVAL_FILE: &str = "eval_summary.json";

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.ckpt"))
    }

    pub fn eval_summary(&self) -> PathBuf {
        self.root.join(EVAL_FILE)
    }

    /// Checkpoints in step order.
    pub fn list_checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(step) = step {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimization steps.
    pub step: usize,
    pub policy: ModelParams,
    pub reference: ModelParams,
    pub optimizer: Optimizer,
}

impl TrainState {
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut groups = std::collections::BTreeMap::new();
        groups.insert("policy".to_string(), self.policy.clone());
        groups.insert("ref".to_string(), self.reference.clone());
        if let (Some(m), Some(v)) = (&self.optimizer.m, &self.optimizer.v) {
            groups.insert("adam_m".to_string(), m.clone());
            groups.insert("adam_v".to_string(), v.clone());
        }
        Checkpoint {
            step: self.step as u64,
            dims: self.policy.dims,
            meta: serde_json::json!({
                "mode": cfg.mode.name(),
                "seed": cfg.seed,
                "optimizer": self.optimizer.kind,
                "optimizer_t": self.optimizer.t,
            }),
            groups,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: OptimizerKind = serde_json::from_value(ckpt.meta["optimizer"].clone())
            .map_err(|e| Error::Checkpoint(format!("optimizer kind: {e}")))?;
        let t = ckpt.meta["optimizer_t"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing optimizer_t".into()))?;
        let moments = |name: &str| -> Result<Option<ModelParams>> {
            match kind {
                OptimizerKind::Sgd => Ok(None),
                OptimizerKind::Adam => Ok(Some(ckpt.group(name)?.clone())),
            }
        };
        Ok(TrainState {
            step: ckpt.step as usize,
            policy: ckpt.group("policy")?.clone(),
            reference: ckpt.group("ref")?.clone(),
            optimizer: Optimizer {
                kind,
                t,
                m: moments("adam_m")?,
                v: moments("adam_v")?,
            },
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Replace an existing run directory.
    pub force: bool,
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Stop after this many completed steps (the run stays resumable).
    pub stop_after: Option<usize>,
    /// Skip the closing evaluation.
    pub skip_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub full: EvalReport,
    pub compressed: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub paths: RunPaths,
    pub state: TrainState,
    pub eval: Option<EvalSummary>,
}

/// Every `(episode, step)` pair of a dataset.
fn step_index(episodes: &[Episode]) -> Vec<(usize, usize)> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e, t)))
        .collect()
}

/// Behaviour cloning on oracle responses. Each context keeps a uniformly
/// drawn number of history steps, so the warm-started policy has seen every
/// history length. Returns the mean token negative log-likelihood per step.
pub fn warmup(params: &mut ModelParams, agent: &Agent, episodes: &[Episode], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let index = step_index(episodes);
    if index.is_empty() {
        return Err(Error::ShapeMismatch("empty training dataset".into()));
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam, params);
    let mut losses = Vec::with_capacity(cfg.warmup_steps);
    for w in 0..cfg.warmup_steps {
        let mut rng = derive_rng(cfg.seed, &["warmup".into(), w.into()]);
        let mut grads = ModelParams::zeros(params.dims);
        let mut loss = 0.0;
        let scale = 1.0 / cfg.warmup_batch as f64;
        for _ in 0..cfg.warmup_batch {
            let (e, t) = index[rng.gen_range(0..index.len())];
            let ep = &episodes[e];
            let tau = rng.gen_range(0..=agent.window);
            let ctx = ep.step_context(t, agent.window)?.truncated(tau);
            let seq = agent.encode(&ctx)?;
            let resp = agent.vocab.encode_response(ep.oracle_action(t)?)?;
            let fwd = forward_responses(params, &seq, std::slice::from_ref(&resp), DropSpec::none(), true)?;
            let mut dl = ndarray::Array2::zeros(fwd.logits.dim());
            let w_tok = scale / resp.len() as f64;
            for (j, &tok) in resp.iter().enumerate() {
                let row = fwd.row(0, j);
                let p = softmax(fwd.logits.row(row).as_slice().expect("contiguous logits"), 1.0);
                loss -= w_tok * p[tok as usize].ln();
                for (v, pv) in p.iter().enumerate() {
                    dl[[row, v]] += w_tok * pv;
                }
                dl[[row, tok as usize]] -= w_tok;
            }
            fwd.backward(params, &dl, &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss("warm-start loss"));
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(params, &grads, cfg.warmup_lr);
        losses.push(loss);
        if (w + 1) % 100 == 0 {
            log::info!("warm start {}/{}: nll {:.4}", w + 1, cfg.warmup_steps, loss);
        }
    }
    Ok(losses)
}

/// Parses a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Keeps the first `n` lines of the metrics log.
fn truncate_metrics(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    if kept.lines().count() < n {
        return Err(Error::Checkpoint(format!(
            "metrics log {} has fewer than {n} records",
            path.display()
        )));
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn prepare_dir(paths: &RunPaths, force: bool) -> Result<()> {
    let root = &paths.root;
    if root.exists() {
        let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::RunDirExists(root.clone()));
            }
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    let ck = paths.checkpoints();
    fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))
}

/// Runs (or resumes) training into `out`. The run is a pure function of the
/// configuration: every random draw comes from a stream labelled with the
/// run seed and the step.
pub fn train(run: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = run.train_config();
    let agent = run.agent();
    let paths = RunPaths::new(out);
    let data = run.train_dataset()?;
    let episodes = &data.episodes;
    let index = step_index(episodes);
    if index.is_empty() {
        return Err(Error::ShapeMismatch("empty training dataset".into()));
    }

    let mut state = if opts.resume {
        let (_, latest) = paths
            .list_checkpoints()?
            .pop()
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint to resume in {}", out.display())))?;
        let state = TrainState::from_checkpoint(&load_checkpoint(&latest)?)?;
        if state.policy.dims != agent.dims() {
            return Err(Error::Checkpoint("checkpoint dimensions differ from the configuration".into()));
        }
        truncate_metrics(&paths.metrics(), state.step)?;
        log::info!("resuming {} at step {}", out.display(), state.step);
        state
    } else {
        prepare_dir(&paths, opts.force)?;
        let cfg_path = paths.config();
        fs::write(&cfg_path, run.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let mut policy = agent.init_params(stream_key(cfg.seed, &["init".into()]))?;
        if cfg.warmup_steps > 0 {
            warmup(&mut policy, &agent, episodes, &cfg)?;
        }
        let optimizer = Optimizer::new(cfg.optimizer, &policy);
        TrainState {
            step: 0,
            reference: policy.clone(),
            policy,
            optimizer,
        }
    };

    let metrics_path = paths.metrics();
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    while state.step < end {
        let u = state.step;
        let mut rng = derive_rng(cfg.seed, &["batch".into(), u.into()]);
        let batch: Vec<(&Episode, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let (e, t) = index[rng.gen_range(0..index.len())];
                (&episodes[e], t)
            })
            .collect();
        let key = stream_key(cfg.seed, &["step".into(), u.into()]);
        let m = hcpo_step(
            &mut state.policy,
            &state.reference,
            &mut state.optimizer,
            &agent,
            &batch,
            &cfg,
            u,
            key,
        )?;
        let line = serde_json::to_string(&m).expect("metrics serialize");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        log_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.step = u + 1;
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps {
            save_checkpoint(&paths.checkpoint(state.step), &state.to_checkpoint(&cfg))?;
        }
        if state.step % 50 == 0 {
            log::info!(
                "step {}/{}: reward {:.3} sr {:.3} loss {:.4}",
                state.step,
                cfg.steps,
                m.mean_reward,
                m.batch_sr,
                m.loss
            );
        }
    }

    let eval = if state.step == cfg.steps && !opts.skip_eval {
        let eval_data = run.eval_dataset()?;
        let summary = EvalSummary {
            full: evaluate(&state.policy, &agent, &eval_data.episodes, DropSpec::none())?,
            compressed: evaluate(
                &state.policy,
                &agent,
                &eval_data.episodes,
                DropSpec::images(run.eval.drop_layer),
            )?,
        };
        let p = paths.eval_summary();
        fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes"))
            .map_err(|e| Error::io(&p, e))?;
        Some(summary)
    } else {
        None
    };
    Ok(TrainOutcome { paths, state, eval })
}
