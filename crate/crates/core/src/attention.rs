//! Batched scaled dot-product multi-head attention shared by the encoders and the bridge.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Query/key/value/output projections of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bq: Option<ParamId>,
    pub bk: Option<ParamId>,
    pub bv: Option<ParamId>,
    pub bo: Option<ParamId>,
    pub width: usize,
    pub heads: usize,
}

impl AttnParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        group: &str,
        width: usize,
        heads: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mut w = |n: &str| store.add(&format!("{prefix}.{n}"), group, normal(rng, &[width, width], std), true);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| {
            bias.then(|| store.add(&format!("{prefix}.{n}"), group, Tensor::zeros(&[width]), false))
        };
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        AttnParams { wq, wk, wv, wo, bq, bk, bv, bo, width, heads }
    }
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, d / heads])
}

/// Attends from `q_in[B, Nq, D]` to `kv_in[B, Nk, D]`.
///
/// `key_valid` (length `B * Nk`) masks keys; masked keys get probability exactly zero.
/// Dropout sits between the attention output and the output projection.
/// Returns the projected output `[B, Nq, D]` and per-head probabilities `[B, heads, Nq, Nk]`.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    a: &AttnParams,
    q_in: Var,
    kv_in: Var,
    key_valid: Option<&[bool]>,
    dropout: f64,
) -> Result<(Var, Var)> {
    let qs = g.shape(q_in).to_vec();
    let ks = g.shape(kv_in).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != a.width || ks[2] != a.width {
        return Err(Error::shape(format!(
            "attention: queries {qs:?}, keys {ks:?}, width {}",
            a.width
        )));
    }
    let (b, nq, nk, h) = (qs[0], qs[1], ks[1], a.heads);
    let dh = a.width / h;

    let q = g.linear(q_in, p.var(a.wq), a.bq.map(|id| p.var(id)))?;
    let k = g.linear(kv_in, p.var(a.wk), a.bk.map(|id| p.var(id)))?;
    let v = g.linear(kv_in, p.var(a.wv), a.bv.map(|id| p.var(id)))?;
    let q = split_heads(g, q, h)?;
    let k = split_heads(g, k, h)?;
    let v = split_heads(g, v, h)?;

    let scores = g.bmm(q, k, true)?;
    let scores = g.mul_const(scores, T::c(1.0 / (dh as f64).sqrt()))?;
    let probs = match key_valid {
        Some(valid) => {
            if valid.len() != b * nk {
                return Err(Error::shape(format!(
                    "key mask has {} entries, expected {}",
                    valid.len(),
                    b * nk
                )));
            }
            let mut keep = Vec::with_capacity(b * h * nq * nk);
            for bi in 0..b {
                let row = &valid[bi * nk..(bi + 1) * nk];
                for _ in 0..h * nq {
                    keep.extend_from_slice(row);
                }
            }
            g.masked_softmax(scores, Some(&keep))?
        }
        None => g.softmax(scores)?,
    };

    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.reshape(ctx, &[b, h, nq, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, nq, a.width])?;
    let ctx = g.dropout(ctx, dropout)?;
    let out = g.linear(ctx, p.var(a.wo), a.bo.map(|id| p.var(id)))?;
    let probs = g.reshape(probs, &[b, h, nq, nk])?;
    Ok((out, probs))
}
