//! Incremental decoding over a cached context.

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::forward::{attend_block, forward_group, gelu, layer_norm, DropSpec, OutputRows};
use super::params::ModelParams;
use super::vocab::{Segment, TokenSequence, Vocab};
use crate::error::{Error, Result};

/// Keys and values of the context rows at every layer, plus the logits for
/// the first response token.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    kv: Vec<(Array2<f64>, Array2<f64>)>,
    first_logits: Vec<f64>,
    bos_position: u32,
}

impl PrefixCache {
    pub fn build(params: &ModelParams, prefix: &TokenSequence, drop: DropSpec) -> Result<Self> {
        let fwd = forward_group(params, prefix, &[], drop, OutputRows::Group, false)?;
        Ok(PrefixCache {
            kv: fwd.prefix_kv,
            first_logits: fwd.logits.row(0).to_vec(),
            bos_position: *prefix.positions.last().expect("non-empty context"),
        })
    }

    pub fn first_logits(&self) -> &[f64] {
        &self.first_logits
    }
}

/// Decoding state of one continuation.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    kv: Vec<(Array2<f64>, Array2<f64>)>,
    fed: u32,
    bos_position: u32,
    logits: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams, cache: &PrefixCache) -> Self {
        Decoder {
            params,
            kv: cache.kv.clone(),
            fed: 0,
            bos_position: cache.bos_position,
            logits: cache.first_logits.clone(),
        }
    }

    /// Logits for the next token.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Appends `token` to the continuation and updates the next-token logits.
    pub fn feed(&mut self, token: u32) -> Result<()> {
        let p = self.params;
        let dims = &p.dims;
        if token as usize >= dims.text_vocab {
            return Err(Error::ShapeMismatch(format!("token {token} is not a text token")));
        }
        let pos = (self.bos_position + 1 + self.fed) as usize;
        if pos >= dims.max_positions {
            return Err(Error::ShapeMismatch(format!("response exceeds position table at {pos}")));
        }
        let d = dims.d_model;
        let mut x = Array2::zeros((1, d));
        {
            let mut row = x.row_mut(0);
            row += &p.tok_emb.row(token as usize);
            row += &p.pos_emb.row(pos);
            row += &p.seg_emb.row(Segment::Resp.index());
        }
        for (lp, (kc, vc)) in p.layers.iter().zip(self.kv.iter_mut()) {
            let (h, _, _) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = h.dot(&lp.wq);
            let k = h.dot(&lp.wk);
            let v = h.dot(&lp.wv);
            let mut o = Array2::zeros((1, d));
            attend_block(
                q.as_slice().expect("row"),
                kc.as_slice().expect("cache"),
                vc.as_slice().expect("cache"),
                k.as_slice().expect("row"),
                v.as_slice().expect("row"),
                d,
                dims.heads,
                o.as_slice_mut().expect("row"),
                None,
            );
            kc.push_row(k.row(0)).expect("matching width");
            vc.push_row(v.row(0)).expect("matching width");
            x = x + o.dot(&lp.wo);
            let (h2, _, _) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let mut u = h2.dot(&lp.w1);
            u += &lp.b1;
            let a = u.mapv(gelu);
            x = x + a.dot(&lp.w2);
            x += &lp.b2;
        }
        let (y, _, _) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        let mut logits = y.dot(&p.w_out);
        logits += &p.b_out;
        self.logits = logits.row(0).to_vec();
        self.fed += 1;
        Ok(())
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| ((l - top) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Samples a response until END or `max_len` tokens.
pub fn sample_response<R: Rng + ?Sized>(
    params: &ModelParams,
    cache: &PrefixCache,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    decode(params, cache, max_len, |logits| {
        let probs = softmax(logits, temperature);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::InvalidPmf(e.to_string()))?;
        Ok(dist.sample(rng))
    })
}

/// Greedy decoding; ties go to the lowest token id.
pub fn greedy_response(params: &ModelParams, cache: &PrefixCache, max_len: usize) -> Result<Vec<u32>> {
    decode(params, cache, max_len, |logits| Ok(argmax(logits)))
}

fn decode(
    params: &ModelParams,
    cache: &PrefixCache,
    max_len: usize,
    mut pick: impl FnMut(&[f64]) -> Result<usize>,
) -> Result<Vec<u32>> {
    let mut dec = Decoder::new(params, cache);
    let mut out = Vec::new();
    while out.len() < max_len.max(1) {
        let t = pick(dec.logits())? as u32;
        out.push(t);
        if t == Vocab::END || out.len() >= max_len {
            break;
        }
        dec.feed(t)?;
    }
    Ok(out)
}
