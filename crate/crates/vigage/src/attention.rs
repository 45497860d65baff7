//! Multi-head scaled-dot-product attention (scaling optional).
//!
//! Each head projects queries, keys, and values with its own learned
//! matrices, forms row-softmaxed attention over `Q_i · K_iᵀ`, and applies it
//! to the projected values; head outputs are concatenated feature-wise. The
//! projections are per-head slices of width `d_m`, so `t` heads over a
//! width-D input reproduce width `t·d_m`. By default the logits are *not*
//! divided by `sqrt(d_m)`; pass `scaled = true` to enable that.
//!
//! The network uses this as self-attention (`q = k = v`), but the ops accept
//! distinct inputs.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorId};

/// One attention head's projections: `wq: [d_Q × d_m]`, `wk: [d_K × d_m]`,
/// `wv: [d_V × d_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Parameters for all heads. Every head must share the same projection
/// shapes, and `d_Q` must equal `d_K` so queries and keys live in
/// comparable spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<AttentionHead>,
}

impl AttentionParams {
    pub fn new(heads: Vec<AttentionHead>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::Config("attention needs at least one head".into()));
        };
        let (dq, dm) = (first.wq.rows(), first.wq.cols());
        if first.wk.rows() != dq {
            return Err(Error::Config(format!(
                "query dim {} must equal key dim {}",
                dq,
                first.wk.rows()
            )));
        }
        for (i, h) in heads.iter().enumerate() {
            let same = h.wq.shape() == first.wq.shape()
                && h.wk.shape() == first.wk.shape()
                && h.wv.shape() == first.wv.shape();
            if !same {
                return Err(Error::Config(format!(
                    "head {i} projection shapes differ from head 0"
                )));
            }
            if h.wk.cols() != dm || h.wv.cols() != dm {
                return Err(Error::Config(format!(
                    "head {i} must project q, k, v to the same width d_m={dm}"
                )));
            }
        }
        Ok(Self { heads })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Per-head output width `d_m`.
    pub fn head_dim(&self) -> usize {
        self.heads[0].wq.cols()
    }

    /// Expected input widths `(d_Q, d_K, d_V)`.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        (
            self.heads[0].wq.rows(),
            self.heads[0].wk.rows(),
            self.heads[0].wv.rows(),
        )
    }
}

/// Tape handles for one head's registered projection matrices.
pub type HeadIds = (TensorId, TensorId, TensorId);

/// Builds multi-head attention on the tape and returns the concatenated
/// output `[T_Q × t·d_m]`. `head_ids` are the registered `(wq, wk, wv)`
/// leaves in head order.
pub fn attention_ids(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    head_ids: &[HeadIds],
    scaled: bool,
) -> Result<TensorId> {
    if head_ids.is_empty() {
        return Err(Error::Config("attention needs at least one head".into()));
    }
    let tk = tape.shape(k)[0];
    let tv = tape.shape(v)[0];
    if tk != tv {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let mut heads = Vec::with_capacity(head_ids.len());
    for &(wq, wk, wv) in head_ids {
        let qi = tape.matmul(q, wq)?;
        let ki = tape.matmul(k, wk)?;
        let vi = tape.matmul(v, wv)?;
        let kt = tape.transpose(ki)?;
        let mut logits = tape.matmul(qi, kt)?;
        if scaled {
            let dm = tape.shape(wq)[1] as f64;
            logits = tape.scale(logits, 1.0 / dm.sqrt())?;
        }
        let attn = tape.softmax_rows(logits)?;
        heads.push(tape.matmul(attn, vi)?);
    }
    tape.concat(&heads, 1)
}

/// Projects `q`, `k`, `v` through every head, returning `(Q_i, K_i, V_i)`
/// triples in head order.
pub fn project_heads(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionParams,
) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
    let mut tape = Tape::new();
    let (qid, kid, vid) = (tape.input(q), tape.input(k), tape.input(v));
    params
        .heads
        .iter()
        .map(|h| {
            let wq = tape.input(&h.wq);
            let wk = tape.input(&h.wk);
            let wv = tape.input(&h.wv);
            let qi = tape.matmul(qid, wq)?;
            let ki = tape.matmul(kid, wk)?;
            let vi = tape.matmul(vid, wv)?;
            Ok((tape.tensor(qi), tape.tensor(ki), tape.tensor(vi)))
        })
        .collect()
}

/// Multi-head attention as a plain tensor function (see [`attention_ids`]).
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionParams,
    scaled: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qid, kid, vid) = (tape.input(q), tape.input(k), tape.input(v));
    let head_ids: Vec<HeadIds> = params
        .heads
        .iter()
        .map(|h| (tape.input(&h.wq), tape.input(&h.wk), tape.input(&h.wv)))
        .collect();
    let out = attention_ids(&mut tape, qid, kid, vid, &head_ids, scaled)?;
    Ok(tape.tensor(out))
}
