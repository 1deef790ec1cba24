//! Cross-only bidirectional interaction blocks.
//!
//! One block maps both modalities' hidden states into a shared width `d_s`
//! (`Z = LN(H) · W_{x→s}`), lets each modality attend to the other only, and
//! writes the result back into the native widths through a sigmoid-gated
//! residual: `H' = H + σ(gate) · A · W_{s→x}`. Both directions read the same
//! pre-update states.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{multi_head_attention, AttnParams};
use crate::autodiff::{Graph, Var};
use crate::encoders::LN_EPS;
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

thread_local! {
    static CROSS_ATTENTION_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of cross-attention invocations on this thread since the last reset.
pub fn cross_attention_calls() -> u64 {
    CROSS_ATTENTION_CALLS.with(Cell::get)
}

pub fn reset_cross_attention_calls() {
    CROSS_ATTENTION_CALLS.with(|c| c.set(0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    /// Late fusion only: no interaction blocks.
    None,
    /// One cross block over the two mean-pooled vectors at the top.
    PooledOnly,
    /// Shared-space self-attention followed by cross-attention.
    SelfPlusCross,
    /// Cross-attention only.
    CrossOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] =
        [FusionVariant::None, FusionVariant::PooledOnly, FusionVariant::SelfPlusCross, FusionVariant::CrossOnly];
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::None => "none",
            FusionVariant::PooledOnly => "pooled_only",
            FusionVariant::SelfPlusCross => "self_plus_cross",
            FusionVariant::CrossOnly => "cross_only",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionVariant::None),
            "pooled_only" => Ok(FusionVariant::PooledOnly),
            "self_plus_cross" => Ok(FusionVariant::SelfPlusCross),
            "cross_only" => Ok(FusionVariant::CrossOnly),
            other => Err(Error::config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Early,
    Middle,
    Late,
    Staggered,
    Explicit(Vec<usize>),
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Early => f.write_str("early"),
            Placement::Middle => f.write_str("middle"),
            Placement::Late => f.write_str("late"),
            Placement::Staggered => f.write_str("staggered"),
            Placement::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Placement::Early),
            "middle" => Ok(Placement::Middle),
            "late" => Ok(Placement::Late),
            "staggered" => Ok(Placement::Staggered),
            list => list
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Placement::Explicit)
                .map_err(|_| Error::config(format!("unknown placement `{list}`"))),
        }
    }
}

/// Encoder layer indices (1-based) after which an interaction block runs.
pub fn placement_indices(mode: &Placement, layers: usize, q: usize) -> Result<Vec<usize>> {
    if q == 0 {
        return Err(Error::config("at least one interaction block is required"));
    }
    if q > layers {
        return Err(Error::config(format!("{q} interaction blocks exceed {layers} encoder layers")));
    }
    let idx: Vec<usize> = match mode {
        Placement::Early => (1..=q).collect(),
        Placement::Late => (layers - q + 1..=layers).collect(),
        Placement::Middle => {
            let start = (layers - q) / 2 + 1;
            (start..start + q).collect()
        }
        Placement::Staggered => {
            let mut v: Vec<usize> =
                (1..=q).map(|i| ((i * layers) as f64 / q as f64).round() as usize).collect();
            v.dedup();
            v
        }
        Placement::Explicit(v) => v.clone(),
    };
    if idx.len() != q {
        return Err(Error::config(format!("placement {mode} gives {} indices for Q = {q}", idx.len())));
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx[0] < 1 || idx[idx.len() - 1] > layers {
        return Err(Error::config(format!(
            "placement indices {idx:?} must be strictly increasing within [1, {layers}]"
        )));
    }
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeConfig {
    pub q: usize,
    pub placement: Placement,
    pub d_s: usize,
    pub h_s: usize,
    pub fusion: FusionVariant,
    /// Initial raw gate value; the effective gate is its sigmoid.
    pub gate_init: f64,
    pub dropout: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            q: 2,
            placement: Placement::Late,
            d_s: 64,
            h_s: 4,
            fusion: FusionVariant::CrossOnly,
            gate_init: -4.0,
            dropout: 0.1,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self, layers: usize) -> Result<Vec<usize>> {
        if self.d_s == 0 || self.h_s == 0 || self.d_s % self.h_s != 0 {
            return Err(Error::config(format!(
                "shared width {} must be a positive multiple of {} heads",
                self.d_s, self.h_s
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("bridge dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.gate_init.is_finite() {
            return Err(Error::config("gate_init must be finite"));
        }
        placement_indices(&self.placement, layers, self.q)
    }
}

/// Head-averaged attention probabilities of one interaction block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// `[B, N_t, N_v]`
    pub t_to_v: Var,
    /// `[B, N_v, N_t]`
    pub v_to_t: Var,
    /// `B * N_t` validity of text positions.
    pub text_valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct InteractionBlockParams {
    pub ln_v_g: ParamId,
    pub ln_v_b: ParamId,
    pub ln_t_g: ParamId,
    pub ln_t_b: ParamId,
    pub w_v_to_s: ParamId,
    pub w_t_to_s: ParamId,
    pub w_s_to_v: ParamId,
    pub w_s_to_t: ParamId,
    /// Text queries, vision keys/values.
    pub attn_t_to_v: AttnParams,
    /// Vision queries, text keys/values.
    pub attn_v_to_t: AttnParams,
    pub self_t: Option<AttnParams>,
    pub self_v: Option<AttnParams>,
    pub gate_t: ParamId,
    pub gate_v: ParamId,
}

impl InteractionBlockParams {
    /// Parameters go to group `{prefix}`, except the two gates which go to `gate_group`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        gate_group: &str,
        d_v: usize,
        d_t: usize,
        cfg: &BridgeConfig,
        with_self_attention: bool,
    ) -> Self {
        let d_s = cfg.d_s;
        let name = |n: &str| format!("{prefix}.{n}");
        let ln_v_g = store.add(&name("ln_v.g"), prefix, Tensor::full(&[d_v], T::one()), false);
        let ln_v_b = store.add(&name("ln_v.b"), prefix, Tensor::zeros(&[d_v]), false);
        let ln_t_g = store.add(&name("ln_t.g"), prefix, Tensor::full(&[d_t], T::one()), false);
        let ln_t_b = store.add(&name("ln_t.b"), prefix, Tensor::zeros(&[d_t]), false);
        let w_v_to_s = store.add(&name("w_v_to_s"), prefix, normal(rng, &[d_v, d_s], 1.0 / (d_v as f64).sqrt()), true);
        let w_t_to_s = store.add(&name("w_t_to_s"), prefix, normal(rng, &[d_t, d_s], 1.0 / (d_t as f64).sqrt()), true);
        let w_s_to_v = store.add(&name("w_s_to_v"), prefix, normal(rng, &[d_s, d_v], 1.0 / (d_s as f64).sqrt()), true);
        let w_s_to_t = store.add(&name("w_s_to_t"), prefix, normal(rng, &[d_s, d_t], 1.0 / (d_s as f64).sqrt()), true);
        let attn_t_to_v = AttnParams::init(store, rng, &name("attn_t_to_v"), prefix, d_s, cfg.h_s, false);
        let attn_v_to_t = AttnParams::init(store, rng, &name("attn_v_to_t"), prefix, d_s, cfg.h_s, false);
        let (self_t, self_v) = if with_self_attention {
            (
                Some(AttnParams::init(store, rng, &name("self_t"), prefix, d_s, cfg.h_s, false)),
                Some(AttnParams::init(store, rng, &name("self_v"), prefix, d_s, cfg.h_s, false)),
            )
        } else {
            (None, None)
        };
        let gate = T::c(cfg.gate_init);
        let gate_t = store.add(&name("gate_t"), gate_group, Tensor::scalar(gate), false);
        let gate_v = store.add(&name("gate_v"), gate_group, Tensor::scalar(gate), false);
        InteractionBlockParams {
            ln_v_g,
            ln_v_b,
            ln_t_g,
            ln_t_b,
            w_v_to_s,
            w_t_to_s,
            w_s_to_v,
            w_s_to_t,
            attn_t_to_v,
            attn_v_to_t,
            self_t,
            self_v,
            gate_t,
            gate_v,
        }
    }
}

/// `Z_v = LN(H_v) W_{v→s}`, `Z_t = LN(H_t) W_{t→s}`.
pub fn project_to_shared<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    blk: &InteractionBlockParams,
    h_v: Var,
    h_t: Var,
) -> Result<(Var, Var)> {
    let x_v = g.layer_norm(h_v, p.var(blk.ln_v_g), p.var(blk.ln_v_b), LN_EPS)?;
    let z_v = g.matmul(x_v, p.var(blk.w_v_to_s))?;
    let x_t = g.layer_norm(h_t, p.var(blk.ln_t_g), p.var(blk.ln_t_b), LN_EPS)?;
    let z_t = g.matmul(x_t, p.var(blk.w_t_to_s))?;
    Ok((z_v, z_t))
}

/// Multi-head attention with queries from one modality and keys/values from the other.
///
/// Returns the attention output `[B, N_q, d_s]` and the head-averaged probabilities `[B, N_q, N_kv]`.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    attn: &AttnParams,
    z_q: Var,
    z_kv: Var,
    kv_valid: Option<&[bool]>,
    dropout: f64,
) -> Result<(Var, Var)> {
    CROSS_ATTENTION_CALLS.with(|c| c.set(c.get() + 1));
    let (out, probs) = multi_head_attention(g, p, attn, z_q, z_kv, kv_valid, dropout)?;
    let mean = g.reduce_axis(probs, 1, 1.0 / attn.heads as f64)?;
    Ok((out, mean))
}

/// `H + σ(gate_raw) · (A · W_{s→x})`
pub fn gated_residual_update<T: Real>(g: &mut Graph<T>, h: Var, a: Var, w_s_to_x: Var, gate_raw: Var) -> Result<Var> {
    let upd = g.matmul(a, w_s_to_x)?;
    let gate = g.sigmoid(gate_raw)?;
    let upd = g.scale_by(upd, gate)?;
    g.add(h, upd)
}

/// Shared-space self-attention with a residual connection.
fn shared_self_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    attn: &AttnParams,
    z: Var,
    valid: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    let (a, _) = multi_head_attention(g, p, attn, z, z, valid, dropout)?;
    g.add(z, a)
}

/// One interaction layer. Both directions are computed from the same input states.
#[allow(clippy::too_many_arguments)]
pub fn interaction_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    blk: &InteractionBlockParams,
    h_v: Var,
    h_t: Var,
    text_valid: Option<&[bool]>,
    dropout: f64,
) -> Result<(Var, Var, AttentionRecord)> {
    let (mut z_v, mut z_t) = project_to_shared(g, p, blk, h_v, h_t)?;
    if let (Some(st), Some(sv)) = (&blk.self_t, &blk.self_v) {
        z_t = shared_self_attention(g, p, st, z_t, text_valid, dropout)?;
        z_v = shared_self_attention(g, p, sv, z_v, None, dropout)?;
    }
    let (a_t, p_tv) = cross_attention(g, p, &blk.attn_t_to_v, z_t, z_v, None, dropout)?;
    let (a_v, p_vt) = cross_attention(g, p, &blk.attn_v_to_t, z_v, z_t, text_valid, dropout)?;
    let h_t_new = gated_residual_update(g, h_t, a_t, p.var(blk.w_s_to_t), p.var(blk.gate_t))?;
    let h_v_new = gated_residual_update(g, h_v, a_v, p.var(blk.w_s_to_v), p.var(blk.gate_v))?;
    let s = g.shape(h_t).to_vec();
    let text_valid = match text_valid {
        Some(v) => v.to_vec(),
        None => vec![true; s[0] * s[1]],
    };
    Ok((h_v_new, h_t_new, AttentionRecord { t_to_v: p_tv, v_to_t: p_vt, text_valid }))
}
