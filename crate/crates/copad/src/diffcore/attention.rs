//! Scaled dot-product multi-head attention built from the forward
//! primitives, with an optional row mask for block-structured attention.

use super::Tensor;
use crate::{Error, Result};

/// Projection parameters for one attention module.
pub struct AttnParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

/// Row-major allow matrix: `allowed[q * keys + k]`.
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    /// Block-diagonal mask grouping row `i` with row `j` when
    /// `i % group == j % group` (used to fold independent groups into one
    /// batched attention call).
    pub fn same_residue(rows: usize, group: usize) -> AttnMask {
        let mut allowed = vec![false; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                allowed[i * rows + j] = i % group == j % group;
            }
        }
        AttnMask {
            queries: rows,
            keys: rows,
            allowed,
        }
    }
}

/// Standard multi-head cross-attention: per-head projections of the query
/// and key/value sources, softmax over the key axis, concatenated heads,
/// output projection. Query and key/value sources share the model width.
pub fn multi_head_attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    heads: usize,
    params: &AttnParams,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    let width = match q_src.shape() {
        [_, c] => *c,
        other => {
            return Err(Error::Shape {
                op: "multi_head_attention",
                detail: format!("query source must be 2-D, got {other:?}"),
            })
        }
    };
    if kv_src.shape().len() != 2 || kv_src.shape()[1] != width {
        return Err(Error::Shape {
            op: "multi_head_attention",
            detail: format!(
                "key/value source {:?} does not match query width {width}",
                kv_src.shape()
            ),
        });
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "attention width {width} not divisible by {heads} heads"
        )));
    }
    let n_q = q_src.shape()[0];
    let n_k = kv_src.shape()[0];
    if let Some(m) = mask {
        if m.queries != n_q || m.keys != n_k {
            return Err(Error::Shape {
                op: "multi_head_attention",
                detail: format!(
                    "mask {}x{} does not match {n_q} queries x {n_k} keys",
                    m.queries, m.keys
                ),
            });
        }
    }
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = q_src.linear(params.wq, params.bq)?;
    let k = kv_src.linear(params.wk, params.bk)?;
    let v = kv_src.linear(params.wv, params.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * head_dim, head_dim)?;
        let kh = k.slice_cols(h * head_dim, head_dim)?;
        let vh = v.slice_cols(h * head_dim, head_dim)?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let weights = match mask {
            Some(m) => scores.masked_softmax_rows(&m.allowed)?,
            None => scores.softmax(1)?,
        };
        head_outputs.push(weights.matmul(&vh)?);
    }
    let merged = Tensor::concat(1, &head_outputs)?;
    merged.linear(params.wo, params.bo)
}
