//! Grouped transformer forward pass with a reverse-mode tape.
//!
//! A group is one shared context (the prefix, ending with BOS) plus any number
//! of member continuations. Member `m` with response `r` is fed the rows
//! `r[0..len-1]`; each member row attends to every alive prefix row and,
//! causally, to the member's own rows. Members never see each other, so one
//! pass scores all responses of a rollout group against the same context.
//!
//! Output rows are the BOS row (predicting `r[0]` for every member) followed
//! by all member rows in member order.
//!
//! A [`DropSpec`] removes prefix rows of the chosen history segments before
//! layer `k` (0-based). Removed rows leave the residual stream, so later
//! layers do less work.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::params::{LayerParams, ModelParams};
use super::vocab::{Segment, TokenSequence};
use crate::error::{Error, Result};

/// Per-layer key and value rows.
type KeyValue = (Array2<f64>, Array2<f64>);

pub const LN_EPS: f64 = 1e-5;

/// Which history segments to remove, and from which layer on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropSpec {
    pub k: usize,
    pub v_his: bool,
    pub a_his: bool,
}

impl DropSpec {
    pub fn none() -> Self {
        DropSpec {
            k: 0,
            v_his: false,
            a_his: false,
        }
    }

    /// Drop history observations.
    pub fn images(k: usize) -> Self {
        DropSpec {
            k,
            v_his: true,
            a_his: false,
        }
    }

    /// Drop history actions.
    pub fn actions(k: usize) -> Self {
        DropSpec {
            k,
            v_his: false,
            a_his: true,
        }
    }

    pub fn both(k: usize) -> Self {
        DropSpec {
            k,
            v_his: true,
            a_his: true,
        }
    }

    pub fn drops(&self, segment: Segment) -> bool {
        match segment {
            Segment::VHis => self.v_his,
            Segment::AHis => self.a_his,
            _ => false,
        }
    }

    pub fn is_noop(&self, layers: usize) -> bool {
        (!self.v_his && !self.a_his) || self.k >= layers
    }
}

#[derive(Debug, Clone, Copy)]
struct Row {
    token: u32,
    position: u32,
    segment: Segment,
}

/// Row layout of one layer: `prefix` rows first, then member blocks.
#[derive(Debug, Clone)]
struct Blocks {
    prefix: usize,
    /// (start row, length) per member.
    members: Vec<(usize, usize)>,
}

impl Blocks {
    fn rows(&self) -> usize {
        self.prefix + self.members.iter().map(|m| m.1).sum::<usize>()
    }
}

struct LayerTape {
    blocks: Blocks,
    xhat1: Array2<f64>,
    rstd1: Vec<f64>,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Vec<f64>>,
    o: Array2<f64>,
    xhat2: Array2<f64>,
    rstd2: Vec<f64>,
    h2: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

struct Tape {
    rows: Vec<Row>,
    n_prefix: usize,
    /// Prefix rows kept from layer `compact_at` on.
    alive: Vec<usize>,
    compact_at: Option<usize>,
    layers: Vec<LayerTape>,
    out_rows: Vec<usize>,
    final_rows: usize,
    xhat_f: Array2<f64>,
    rstd_f: Vec<f64>,
    y_f: Array2<f64>,
}

/// Which rows receive output logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OutputRows {
    /// BOS (the last prefix row) followed by all member rows.
    Group,
    /// Every surviving row.
    All,
}

pub struct GroupForward {
    /// One row per output position, over the text vocabulary.
    pub logits: Array2<f64>,
    /// Rows processed by each layer.
    pub layer_rows: Vec<usize>,
    /// Original indices of the output rows (prefix rows first, then member
    /// rows numbered after the prefix).
    pub out_index: Vec<usize>,
    resp_lens: Vec<usize>,
    member_out: Vec<usize>,
    tape: Option<Tape>,
    /// Per-layer keys/values of the alive prefix rows; filled only when the
    /// group has no members.
    pub(crate) prefix_kv: Vec<(Array2<f64>, Array2<f64>)>,
}

impl GroupForward {
    pub fn members(&self) -> usize {
        self.resp_lens.len()
    }

    pub fn response_len(&self, m: usize) -> usize {
        self.resp_lens[m]
    }

    /// Output row predicting response token `j` of member `m`.
    pub fn row(&self, m: usize, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.member_out[m] + j - 1
        }
    }

    pub fn logits_at(&self, m: usize, j: usize) -> ArrayView1<'_, f64> {
        self.logits.row(self.row(m, j))
    }

    /// Reverse pass: accumulates parameter gradients of a scalar whose
    /// gradient with respect to `self.logits` is `dlogits`.
    pub fn backward(&self, params: &ModelParams, dlogits: &Array2<f64>, grads: &mut ModelParams) -> Result<()> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::ShapeMismatch("forward pass was run without a tape".into()))?;
        if dlogits.dim() != self.logits.dim() {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient {:?} vs logits {:?}",
                dlogits.dim(),
                self.logits.dim()
            )));
        }
        let d = params.dims.d_model;
        grads.b_out += &dlogits.sum_axis(Axis(0));
        general_mat_mul(1.0, &tape.y_f.t(), dlogits, 1.0, &mut grads.w_out);
        let dy = dlogits.dot(&params.w_out.t());
        let dxo = layer_norm_backward(
            &dy,
            &tape.xhat_f,
            &tape.rstd_f,
            &params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );
        let mut dx = Array2::zeros((tape.final_rows, d));
        for (i, &r) in tape.out_rows.iter().enumerate() {
            let mut row = dx.row_mut(r);
            row += &dxo.row(i);
        }

        for l in (0..params.layers.len()).rev() {
            dx = layer_backward(&params.layers[l], &mut grads.layers[l], &tape.layers[l], params.dims.heads, dx);
            if tape.compact_at == Some(l) {
                let n_alive = tape.alive.len();
                let total = tape.rows.len();
                let mut full = Array2::zeros((total, d));
                for (i, &a) in tape.alive.iter().enumerate() {
                    full.row_mut(a).assign(&dx.row(i));
                }
                for r in 0..total - tape.n_prefix {
                    full.row_mut(tape.n_prefix + r).assign(&dx.row(n_alive + r));
                }
                dx = full;
            }
        }

        for (i, row) in tape.rows.iter().enumerate() {
            embed_backward(params, grads, row, dx.row(i));
        }
        Ok(())
    }
}

fn embed_row(params: &ModelParams, row: &Row, out: &mut [f64]) -> Result<()> {
    let dims = &params.dims;
    let pos = row.position as usize;
    if pos >= dims.max_positions {
        return Err(Error::ShapeMismatch(format!(
            "position {pos} outside table of {}",
            dims.max_positions
        )));
    }
    let add = |out: &mut [f64], src: ArrayView1<f64>| {
        for (o, s) in out.iter_mut().zip(src.iter()) {
            *o += s;
        }
    };
    out.fill(0.0);
    match split_token(dims, row.token)? {
        TokenParts::Text(t) => add(out, params.tok_emb.row(t)),
        TokenParts::Cell(k, c, g) => {
            add(out, params.kind_emb.row(k));
            add(out, params.color_emb.row(c));
            add(out, params.glyph_emb.row(g));
        }
    }
    add(out, params.pos_emb.row(pos));
    add(out, params.seg_emb.row(row.segment.index()));
    Ok(())
}

fn embed_backward(params: &ModelParams, grads: &mut ModelParams, row: &Row, g: ArrayView1<f64>) {
    let parts = split_token(&params.dims, row.token).expect("validated in forward");
    match parts {
        TokenParts::Text(t) => grads.tok_emb.row_mut(t).scaled_add(1.0, &g),
        TokenParts::Cell(k, c, gl) => {
            grads.kind_emb.row_mut(k).scaled_add(1.0, &g);
            grads.color_emb.row_mut(c).scaled_add(1.0, &g);
            grads.glyph_emb.row_mut(gl).scaled_add(1.0, &g);
        }
    }
    grads.pos_emb.row_mut(row.position as usize).scaled_add(1.0, &g);
    grads.seg_emb.row_mut(row.segment.index()).scaled_add(1.0, &g);
}

enum TokenParts {
    Text(usize),
    Cell(usize, usize, usize),
}

fn split_token(dims: &super::params::ModelDims, token: u32) -> Result<TokenParts> {
    let t = token as usize;
    if t < dims.text_vocab {
        return Ok(TokenParts::Text(t));
    }
    let packed = t - dims.text_vocab;
    let glyph = packed % dims.glyphs.max(1);
    let color = (packed / dims.glyphs.max(1)) % dims.colors.max(1);
    let kind = packed / (dims.glyphs * dims.colors).max(1);
    if kind >= dims.kinds {
        return Err(Error::VocabularyOverflow(format!(
            "token id {token} outside input vocabulary of {}",
            dims.input_vocab()
        )));
    }
    Ok(TokenParts::Cell(kind, color, glyph))
}

/// Row-wise layer norm. Returns the output, the normalized input and the
/// reciprocal standard deviations.
pub(crate) fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[[i, j]] = xh;
            y[[i, j]] = xh * g[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &[f64],
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let gy = dy[[i, j]];
            dg[j] += gy * xhat[[i, j]];
            db[j] += gy;
            dxhat[j] = gy * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[[i, j]] = rstd[i] * (dxhat[j] - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Multi-head attention of `n` new rows over `p` context rows plus,
/// causally, the new rows themselves. All slices are row-major with width
/// `d`. Attention probabilities are appended to `probs` head by head, row by
/// row, when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_block(
    q: &[f64],
    k_ext: &[f64],
    v_ext: &[f64],
    k_own: &[f64],
    v_own: &[f64],
    d: usize,
    heads: usize,
    out: &mut [f64],
    mut probs: Option<&mut Vec<f64>>,
) {
    let n = q.len() / d;
    let p = k_ext.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = vec![0.0; p + n];
    for h in 0..heads {
        let c = h * dh;
        for i in 0..n {
            let qi = &q[i * d + c..i * d + c + dh];
            let len = p + i + 1;
            for j in 0..p {
                s[j] = dot(qi, &k_ext[j * d + c..j * d + c + dh]) * scale;
            }
            for j in 0..=i {
                s[p + j] = dot(qi, &k_own[j * d + c..j * d + c + dh]) * scale;
            }
            let top = s[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in &mut s[..len] {
                *x = (*x - top).exp();
                z += *x;
            }
            for x in &mut s[..len] {
                *x /= z;
            }
            let oi = &mut out[i * d + c..i * d + c + dh];
            oi.fill(0.0);
            for j in 0..len {
                let vj = if j < p {
                    &v_ext[j * d + c..j * d + c + dh]
                } else {
                    &v_own[(j - p) * d + c..(j - p) * d + c + dh]
                };
                let w = s[j];
                for (o, v) in oi.iter_mut().zip(vj) {
                    *o += w * v;
                }
            }
            if let Some(pr) = probs.as_deref_mut() {
                pr.extend_from_slice(&s[..len]);
            }
        }
    }
}

struct AttnGrads<'a> {
    dq: &'a mut [f64],
    dk_ext: &'a mut [f64],
    dv_ext: &'a mut [f64],
    dk_own: &'a mut [f64],
    dv_own: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
fn attend_block_backward(
    dout: &[f64],
    q: &[f64],
    k_ext: &[f64],
    v_ext: &[f64],
    k_own: &[f64],
    v_own: &[f64],
    d: usize,
    heads: usize,
    probs: &[f64],
    g: AttnGrads<'_>,
) {
    let n = q.len() / d;
    let p = k_ext.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; p + n];
    let mut cursor = 0;
    for h in 0..heads {
        let c = h * dh;
        for i in 0..n {
            let len = p + i + 1;
            let pr = &probs[cursor..cursor + len];
            cursor += len;
            let doi = &dout[i * d + c..i * d + c + dh];
            let mut sum = 0.0;
            for j in 0..len {
                let (vj, dvj) = if j < p {
                    (&v_ext[j * d + c..j * d + c + dh], &mut g.dv_ext[j * d + c..j * d + c + dh])
                } else {
                    let r = (j - p) * d + c;
                    (&v_own[r..r + dh], &mut g.dv_own[r..r + dh])
                };
                dp[j] = dot(doi, vj);
                sum += pr[j] * dp[j];
                for (dv, o) in dvj.iter_mut().zip(doi) {
                    *dv += pr[j] * o;
                }
            }
            let qi = &q[i * d + c..i * d + c + dh];
            for j in 0..len {
                let ds = pr[j] * (dp[j] - sum) * scale;
                if ds == 0.0 {
                    continue;
                }
                let (kj, dkj) = if j < p {
                    (&k_ext[j * d + c..j * d + c + dh], &mut g.dk_ext[j * d + c..j * d + c + dh])
                } else {
                    let r = (j - p) * d + c;
                    (&k_own[r..r + dh], &mut g.dk_own[r..r + dh])
                };
                let dqi = &mut g.dq[i * d + c..i * d + c + dh];
                for t in 0..dh {
                    dqi[t] += ds * kj[t];
                    dkj[t] += ds * qi[t];
                }
            }
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn layer_forward(
    lp: &LayerParams,
    x: Array2<f64>,
    blocks: &Blocks,
    heads: usize,
    tape: Option<&mut Vec<LayerTape>>,
    want_kv: bool,
) -> (Array2<f64>, Option<KeyValue>) {
    let (n, d) = x.dim();
    let (h, xhat1, rstd1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
    let q = h.dot(&lp.wq);
    let k = h.dot(&lp.wk);
    let v = h.dot(&lp.wv);
    let mut o = Array2::zeros((n, d));
    let record = tape.is_some();
    let mut probs: Vec<Vec<f64>> = Vec::new();
    {
        let (qs, ks, vs) = (slice(&q), slice(&k), slice(&v));
        let os = o.as_slice_mut().expect("standard layout");
        let pe = blocks.prefix * d;
        let mut pr = record.then(Vec::new);
        attend_block(&qs[..pe], &[], &[], &ks[..pe], &vs[..pe], d, heads, &mut os[..pe], pr.as_mut());
        probs.extend(pr);
        for &(start, len) in &blocks.members {
            let r = start * d..(start + len) * d;
            let mut pr = record.then(Vec::new);
            attend_block(
                &qs[r.clone()],
                &ks[..pe],
                &vs[..pe],
                &ks[r.clone()],
                &vs[r.clone()],
                d,
                heads,
                &mut os[r],
                pr.as_mut(),
            );
            probs.extend(pr);
        }
    }
    let mut x1 = x;
    general_mat_mul(1.0, &o, &lp.wo, 1.0, &mut x1);
    let (h2, xhat2, rstd2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
    let mut u = h2.dot(&lp.w1);
    u += &lp.b1;
    let a = u.mapv(gelu);
    let mut x2 = x1;
    general_mat_mul(1.0, &a, &lp.w2, 1.0, &mut x2);
    x2 += &lp.b2;

    let pe = blocks.prefix;
    let kv = want_kv.then(|| {
        (
            k.slice(ndarray::s![..pe, ..]).to_owned(),
            v.slice(ndarray::s![..pe, ..]).to_owned(),
        )
    });
    if let Some(t) = tape {
        t.push(LayerTape {
            blocks: blocks.clone(),
            xhat1,
            rstd1,
            h,
            q,
            k,
            v,
            probs,
            o,
            xhat2,
            rstd2,
            h2,
            u,
            a,
        });
    }
    (x2, kv)
}

fn layer_backward(lp: &LayerParams, g: &mut LayerParams, t: &LayerTape, heads: usize, dx2: Array2<f64>) -> Array2<f64> {
    let (n, d) = dx2.dim();
    g.b2 += &dx2.sum_axis(Axis(0));
    general_mat_mul(1.0, &t.a.t(), &dx2, 1.0, &mut g.w2);
    let mut du = dx2.dot(&lp.w2.t());
    ndarray::Zip::from(&mut du).and(&t.u).for_each(|da, &u| *da *= gelu_grad(u));
    g.b1 += &du.sum_axis(Axis(0));
    general_mat_mul(1.0, &t.h2.t(), &du, 1.0, &mut g.w1);
    let dh2 = du.dot(&lp.w1.t());
    let mut dx1 = dx2;
    dx1 += &layer_norm_backward(&dh2, &t.xhat2, &t.rstd2, &lp.ln2_g, &mut g.ln2_g, &mut g.ln2_b);

    general_mat_mul(1.0, &t.o.t(), &dx1, 1.0, &mut g.wo);
    let d_o = dx1.dot(&lp.wo.t());
    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    {
        let (qs, ks, vs, dos) = (slice(&t.q), slice(&t.k), slice(&t.v), slice(&d_o));
        let dqs = dq.as_slice_mut().expect("standard layout");
        let dks = dk.as_slice_mut().expect("standard layout");
        let dvs = dv.as_slice_mut().expect("standard layout");
        let pe = t.blocks.prefix * d;
        let (dk_pre, dk_rest) = dks.split_at_mut(pe);
        let (dv_pre, dv_rest) = dvs.split_at_mut(pe);
        attend_block_backward(
            &dos[..pe],
            &qs[..pe],
            &[],
            &[],
            &ks[..pe],
            &vs[..pe],
            d,
            heads,
            &t.probs[0],
            AttnGrads {
                dq: &mut dqs[..pe],
                dk_ext: &mut [],
                dv_ext: &mut [],
                dk_own: &mut *dk_pre,
                dv_own: &mut *dv_pre,
            },
        );
        for (b, &(start, len)) in t.blocks.members.iter().enumerate() {
            let r = start * d..(start + len) * d;
            let rr = r.start - pe..r.end - pe;
            attend_block_backward(
                &dos[r.clone()],
                &qs[r.clone()],
                &ks[..pe],
                &vs[..pe],
                &ks[r.clone()],
                &vs[r.clone()],
                d,
                heads,
                &t.probs[b + 1],
                AttnGrads {
                    dq: &mut dqs[r],
                    dk_ext: &mut *dk_pre,
                    dv_ext: &mut *dv_pre,
                    dk_own: &mut dk_rest[rr.clone()],
                    dv_own: &mut dv_rest[rr],
                },
            );
        }
    }
    general_mat_mul(1.0, &t.h.t(), &dq, 1.0, &mut g.wq);
    general_mat_mul(1.0, &t.h.t(), &dk, 1.0, &mut g.wk);
    general_mat_mul(1.0, &t.h.t(), &dv, 1.0, &mut g.wv);
    let mut dh = dq.dot(&lp.wq.t());
    general_mat_mul(1.0, &dk, &lp.wk.t(), 1.0, &mut dh);
    general_mat_mul(1.0, &dv, &lp.wv.t(), 1.0, &mut dh);
    dx1 += &layer_norm_backward(&dh, &t.xhat1, &t.rstd1, &lp.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    dx1
}

/// Runs the grouped forward pass. `responses` may be empty.
pub(crate) fn forward_group(
    params: &ModelParams,
    prefix: &TokenSequence,
    responses: &[Vec<u32>],
    drop: DropSpec,
    output: OutputRows,
    record: bool,
) -> Result<GroupForward> {
    let dims = &params.dims;
    let d = dims.d_model;
    if prefix.is_empty() {
        return Err(Error::ShapeMismatch("empty context".into()));
    }
    if prefix.segments.len() != prefix.len() || prefix.positions.len() != prefix.len() {
        return Err(Error::ShapeMismatch("token, segment and position lengths differ".into()));
    }
    let n_prefix = prefix.len();
    let bos_pos = *prefix.positions.last().expect("non-empty");
    let mut rows: Vec<Row> = (0..n_prefix)
        .map(|i| Row {
            token: prefix.tokens[i],
            position: prefix.positions[i],
            segment: prefix.segments[i],
        })
        .collect();
    let mut members = Vec::with_capacity(responses.len());
    let mut resp_lens = Vec::with_capacity(responses.len());
    for r in responses {
        if r.is_empty() {
            return Err(Error::ShapeMismatch("empty response".into()));
        }
        if let Some(t) = r.iter().find(|t| **t as usize >= dims.text_vocab) {
            return Err(Error::ShapeMismatch(format!("response token {t} is not a text token")));
        }
        let start = rows.len();
        for (j, &t) in r[..r.len() - 1].iter().enumerate() {
            rows.push(Row {
                token: t,
                position: bos_pos + 1 + j as u32,
                segment: Segment::Resp,
            });
        }
        members.push((start, r.len() - 1));
        resp_lens.push(r.len());
    }

    let mut x = Array2::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        embed_row(params, row, x.row_mut(i).as_slice_mut().expect("row slice"))?;
    }

    let compact = !drop.is_noop(dims.layers);
    let alive: Vec<usize> = if compact {
        (0..n_prefix).filter(|&i| !drop.drops(prefix.segments[i])).collect()
    } else {
        (0..n_prefix).collect()
    };
    if compact && alive.last() != Some(&(n_prefix - 1)) {
        return Err(Error::ShapeMismatch("the final context row cannot be dropped".into()));
    }

    let mut blocks = Blocks {
        prefix: n_prefix,
        members,
    };
    let mut layer_tapes = record.then(Vec::new);
    let mut layer_rows = Vec::with_capacity(dims.layers);
    let mut prefix_kv = Vec::with_capacity(dims.layers);
    for (l, lp) in params.layers.iter().enumerate() {
        if compact && l == drop.k {
            let n_members = rows.len() - n_prefix;
            let mut xc = Array2::zeros((alive.len() + n_members, d));
            for (i, &a) in alive.iter().enumerate() {
                xc.row_mut(i).assign(&x.row(a));
            }
            for r in 0..n_members {
                xc.row_mut(alive.len() + r).assign(&x.row(n_prefix + r));
            }
            let shift = n_prefix - alive.len();
            blocks = Blocks {
                prefix: alive.len(),
                members: blocks.members.iter().map(|&(s, n)| (s - shift, n)).collect(),
            };
            x = xc;
        }
        debug_assert_eq!(blocks.rows(), x.nrows());
        layer_rows.push(x.nrows());
        let (next, kv) = layer_forward(lp, x, &blocks, dims.heads, layer_tapes.as_mut(), responses.is_empty());
        x = next;
        prefix_kv.extend(kv);
    }

    let final_rows = x.nrows();
    let p_final = blocks.prefix;
    let out_rows: Vec<usize> = match output {
        OutputRows::Group => std::iter::once(p_final - 1).chain(p_final..final_rows).collect(),
        OutputRows::All => (0..final_rows).collect(),
    };
    let surviving: Vec<usize> = if compact {
        alive.iter().copied().chain(n_prefix..rows.len()).collect()
    } else {
        (0..rows.len()).collect()
    };
    let out_index = out_rows.iter().map(|&r| surviving[r]).collect();
    let xo = x.select(Axis(0), &out_rows);
    let (y_f, xhat_f, rstd_f) = layer_norm(&xo, &params.lnf_g, &params.lnf_b);
    let mut logits = y_f.dot(&params.w_out);
    logits += &params.b_out;

    let mut member_out = Vec::with_capacity(blocks.members.len());
    let mut off = 1;
    for &(_, n) in &blocks.members {
        member_out.push(off);
        off += n;
    }

    let tape = layer_tapes.map(|layers| Tape {
        rows,
        n_prefix,
        alive,
        compact_at: compact.then_some(drop.k),
        layers,
        out_rows,
        final_rows,
        xhat_f,
        rstd_f,
        y_f,
    });
    Ok(GroupForward {
        logits,
        layer_rows,
        out_index,
        resp_lens,
        member_out,
        tape,
        prefix_kv,
    })
}
