//! Group-relative advantages, the clipped surrogate with reference KL, and
//! the branch alignment KL. Every function returns the loss together with its
//! gradient with respect to the logits that produced the log-probabilities.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Guard added to the standard deviation.
pub const ADV_EPS: f64 = 1e-8;

/// `(R_i - mean) / (std + 1e-8)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect()
}

/// One response as seen by a policy-loss branch. Rows of the log-probability
/// matrices are response positions, columns the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct BranchMember<'a> {
    pub tokens: &'a [u32],
    pub new_logp: ArrayView2<'a, f64>,
    pub old_logprobs: &'a [f64],
    /// Reference log-probabilities; required when `beta > 0`.
    pub ref_logp: Option<ArrayView2<'a, f64>>,
    pub advantage: f64,
}

#[derive(Debug, Clone)]
pub struct BranchLoss {
    pub loss: f64,
    /// Sum over members of the token-mean clipped surrogate.
    pub surrogate: f64,
    /// Sum over members of the token-mean reference KL.
    pub kl_ref: f64,
    /// Fraction of tokens whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    /// d loss / d (log-probability of the chosen token), surrogate term only.
    pub dlogprob: Vec<Vec<f64>>,
    /// d loss / d logits for every member.
    pub dlogits: Vec<Array2<f64>>,
}

/// Exact `KL(p || q)` over the vocabulary from log-probabilities.
pub fn kl_from_logp(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

/// Adds `scale * d KL(softmax(z) || q) / dz` into `out`, given `logp = log_softmax(z)`.
fn add_kl_grad(logp: &[f64], logq: &[f64], kl: f64, scale: f64, out: &mut [f64]) {
    for ((o, lp), lq) in out.iter_mut().zip(logp).zip(logq) {
        *o += scale * lp.exp() * (lp - lq - kl);
    }
}

/// Token-level clipped surrogate with per-member advantages, averaged over
/// each member's tokens and summed over members, minus `beta` times the
/// exact reference KL aggregated the same way.
pub fn branch_policy_loss(members: &[BranchMember<'_>], eps: f64, beta: f64) -> Result<BranchLoss> {
    let mut surrogate = 0.0;
    let mut kl_ref = 0.0;
    let mut clipped = 0usize;
    let mut total_tokens = 0usize;
    let mut dlogprob = Vec::with_capacity(members.len());
    let mut dlogits = Vec::with_capacity(members.len());

    for m in members {
        let len = m.tokens.len();
        if len == 0 || m.new_logp.nrows() != len || m.old_logprobs.len() != len {
            return Err(Error::ShapeMismatch("branch member sequences are not aligned".into()));
        }
        let w = 1.0 / len as f64;
        let a = m.advantage;
        let mut dlp = vec![0.0; len];
        let mut dz = Array2::zeros(m.new_logp.dim());
        for (j, &tok) in m.tokens.iter().enumerate() {
            let row = m.new_logp.row(j);
            let row = row.as_slice().expect("contiguous log-probs");
            let lp_new = row[tok as usize];
            let ratio = (lp_new - m.old_logprobs[j]).exp();
            let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
            if clipped_ratio != ratio {
                clipped += 1;
            }
            let unclipped_term = ratio * a;
            let clipped_term = clipped_ratio * a;
            let (term, grad) = if unclipped_term <= clipped_term {
                (unclipped_term, ratio * a)
            } else {
                (clipped_term, 0.0)
            };
            surrogate += w * term;
            // loss = -(surrogate - beta * kl)
            dlp[j] = -w * grad;
            let mut dz_row = dz.row_mut(j);
            let dz_row = dz_row.as_slice_mut().expect("contiguous gradient");
            if dlp[j] != 0.0 {
                for (v, g) in dz_row.iter_mut().enumerate() {
                    *g -= dlp[j] * row[v].exp();
                }
                dz_row[tok as usize] += dlp[j];
            }
            if beta > 0.0 {
                let rf = m
                    .ref_logp
                    .ok_or_else(|| Error::ShapeMismatch("reference log-probs missing with beta > 0".into()))?;
                let rf_row = rf.row(j);
                let rf_row = rf_row.as_slice().expect("contiguous log-probs");
                let kl = kl_from_logp(row, rf_row);
                kl_ref += w * kl;
                add_kl_grad(row, rf_row, kl, beta * w, dz_row);
            }
        }
        total_tokens += len;
        dlogprob.push(dlp);
        dlogits.push(dz);
    }

    let loss = -(surrogate - beta * kl_ref);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("policy loss"));
    }
    Ok(BranchLoss {
        loss,
        surrogate,
        kl_ref,
        clip_fraction: if total_tokens == 0 {
            0.0
        } else {
            clipped as f64 / total_tokens as f64
        },
        dlogprob,
        dlogits,
    })
}

#[derive(Debug, Clone)]
pub struct AlignmentLoss {
    pub loss: f64,
    /// d loss / d student logits. The teacher receives no gradient.
    pub dstudent: Vec<Array2<f64>>,
}

/// Sum over members of the token-mean `KL(student || teacher)`. The teacher
/// log-probabilities are constants.
pub fn alignment_kl(student: &[ArrayView2<'_, f64>], teacher: &[ArrayView2<'_, f64>]) -> Result<AlignmentLoss> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch("student and teacher member counts differ".into()));
    }
    let mut loss = 0.0;
    let mut dstudent = Vec::with_capacity(student.len());
    for (s, t) in student.iter().zip(teacher) {
        if s.dim() != t.dim() || s.nrows() == 0 {
            return Err(Error::ShapeMismatch("student and teacher positions differ".into()));
        }
        let w = 1.0 / s.nrows() as f64;
        let mut dz = Array2::zeros(s.dim());
        for j in 0..s.nrows() {
            let sr = s.row(j);
            let tr = t.row(j);
            let (sr, tr) = (sr.as_slice().expect("contiguous"), tr.as_slice().expect("contiguous"));
            let kl = kl_from_logp(sr, tr);
            loss += w * kl;
            let mut row = dz.row_mut(j);
            add_kl_grad(sr, tr, kl, w, row.as_slice_mut().expect("contiguous"));
        }
        dstudent.push(dz);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss("alignment KL"));
    }
    Ok(AlignmentLoss { loss, dstudent })
}
