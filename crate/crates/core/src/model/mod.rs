//! A small decoder-only transformer policy over GridGUI contexts.
//!
//! Pre-LN blocks (attention without biases, tanh-GELU MLP), learned position
//! and segment embeddings, f64 throughout, with a hand-written reverse pass.

mod checkpoint;
mod decode;
mod forward;
mod params;
mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use decode::{argmax, greedy_response, log_softmax, sample_response, softmax, Decoder, PrefixCache};
pub use forward::{DropSpec, GroupForward, LN_EPS};
pub use params::{LayerParams, ModelDims, ModelParams, TensorView, TensorViewMut};
pub use vocab::{PositionLayout, Segment, TokenSequence, Vocab, ACTION_SLOTS, INSTR_SLOTS};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::GridSpec;
use crate::error::{Error, Result};
use forward::{forward_group, OutputRows};

/// Architecture hyperparameters chosen by the user; the vocabulary and the
/// position table follow from the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_response: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            max_response: 24,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, grid: &GridSpec, vocab: &Vocab, window: usize) -> ModelDims {
        ModelDims {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            text_vocab: vocab.n_text(),
            kinds: grid.kinds,
            colors: grid.colors,
            glyphs: grid.glyphs,
            max_positions: PositionLayout::new(grid, window, self.max_response).max_positions(),
        }
    }
}

/// Grouped forward pass: one context, several responses. Pass `record` to
/// keep the tape needed by [`GroupForward::backward`].
pub fn forward_responses(
    params: &ModelParams,
    context: &TokenSequence,
    responses: &[Vec<u32>],
    drop: DropSpec,
    record: bool,
) -> Result<GroupForward> {
    forward_group(params, context, responses, drop, OutputRows::Group, record)
}

/// Next-token logits at every position that survives to the last layer,
/// with their indices in `seq`.
pub fn forward_logits(params: &ModelParams, seq: &TokenSequence, drop: DropSpec) -> Result<(Vec<usize>, Array2<f64>)> {
    let fwd = forward_group(params, seq, &[], drop, OutputRows::All, false)?;
    Ok((fwd.out_index, fwd.logits))
}

/// Per-token log-probabilities of `response` given `context` under teacher
/// forcing.
pub fn logprob_of(params: &ModelParams, context: &TokenSequence, response: &[u32], drop: DropSpec) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(Error::ShapeMismatch("empty response".into()));
    }
    let fwd = forward_responses(params, context, &[response.to_vec()], drop, false)?;
    Ok(response_logprobs(&fwd, 0, response))
}

/// Log-probabilities of member `m`'s tokens from a grouped forward pass.
pub fn response_logprobs(fwd: &GroupForward, m: usize, response: &[u32]) -> Vec<f64> {
    response
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let row = fwd.logits_at(m, j);
            log_softmax(row.as_slice().expect("contiguous logits"))[t as usize]
        })
        .collect()
}

/// Rows processed by each layer when `drop` is applied to `seq`.
pub fn token_counts(seq: &TokenSequence, drop: DropSpec, layers: usize) -> Vec<usize> {
    let full = seq.len();
    let dropped = seq.segments.iter().filter(|s| drop.drops(**s)).count();
    (0..layers)
        .map(|l| if !drop.is_noop(layers) && l >= drop.k { full - dropped } else { full })
        .collect()
}

/// Analytic forward FLOPs of the transformer blocks, counting a
/// multiply-accumulate as 2 FLOPs: per layer with `n` rows,
/// `8 n d^2` (projections) + `4 n^2 d` (scores and mixing) + `4 n d d_ff`
/// (MLP). Embeddings and the output head are excluded.
pub fn flops_estimate(d_model: usize, d_ff: usize, counts: &[usize]) -> u64 {
    let d = d_model as u64;
    let f = d_ff as u64;
    counts
        .iter()
        .map(|&n| {
            let n = n as u64;
            8 * n * d * d + 4 * n * n * d + 4 * n * d * f
        })
        .sum()
}

/// `1 - flops(compressed) / flops(full)`.
pub fn flops_reduction(d_model: usize, d_ff: usize, full: &[usize], compressed: &[usize]) -> f64 {
    let a = flops_estimate(d_model, d_ff, full) as f64;
    let b = flops_estimate(d_model, d_ff, compressed) as f64;
    if a == 0.0 {
        0.0
    } else {
        1.0 - b / a
    }
}
