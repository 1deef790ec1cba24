//! Training objectives: symmetric InfoNCE, cycle-consistent cross-attention,
//! image–text matching with semi-hard negatives, and their weighted total.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bridge::AttentionRecord;
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;
/// Diagonal entries of the round-trip products are floored here before the log.
pub const CYCLE_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    ItcUni,
    ItcCross,
    Itm,
    Cyc,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::ItcUni, LossKind::ItcCross, LossKind::Itm, LossKind::Cyc];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::ItcUni => "itc_uni",
            LossKind::ItcCross => "itc_cross",
            LossKind::Itm => "itm",
            LossKind::Cyc => "cyc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss component `{s}`")))
    }
}

/// `S_ij = ⟨p_t^(i), p_v^(j)⟩ / τ` with `τ = exp(log_tau)`; rows index texts, columns images.
pub fn similarity<T: Real>(g: &mut Graph<T>, p_t: Var, p_v: Var, log_tau: Var) -> Result<Var> {
    let (st, sv) = (g.shape(p_t).to_vec(), g.shape(p_v).to_vec());
    if st.len() != 2 || st != sv {
        return Err(Error::shape(format!("similarity: text {st:?}, image {sv:?}")));
    }
    let b = st[0];
    let t3 = g.reshape(p_t, &[1, b, st[1]])?;
    let v3 = g.reshape(p_v, &[1, b, st[1]])?;
    let dots = g.bmm(t3, v3, true)?;
    let dots = g.reshape(dots, &[b, b])?;
    let neg = g.mul_const(log_tau, -T::one())?;
    let inv_tau = g.exp(neg)?;
    g.scale_by(dots, inv_tau)
}

/// Symmetric in-batch cross-entropy over a `[B, B]` similarity matrix.
pub fn itc_from_similarity<T: Real>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("itc expects a square similarity matrix, got {shape:?}")));
    }
    let b = shape[0];
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let scale = T::c(-1.0 / (2.0 * b as f64));

    let rows = g.log_softmax(s)?;
    let t2i = g.gather(rows, &diag)?;
    let t2i = g.sum(t2i)?;

    let st = g.transpose2(s)?;
    let cols = g.log_softmax(st)?;
    let i2t = g.gather(cols, &diag)?;
    let i2t = g.sum(i2t)?;

    let both = g.add(t2i, i2t)?;
    g.mul_const(both, scale)
}

pub fn itc_loss<T: Real>(g: &mut Graph<T>, p_t: Var, p_v: Var, log_tau: Var) -> Result<Var> {
    if g.shape(p_t).first() == Some(&0) {
        return Err(Error::contract("itc_loss needs at least one pair"));
    }
    let s = similarity(g, p_t, p_v, log_tau)?;
    itc_from_similarity(g, s)
}

/// Cycle-consistency penalty over the recorded head-averaged attention maps.
///
/// Per layer and example, with `D[i,k] = P̄_{t→v}[i,k] · P̄_{v→t}[k,i]` restricted
/// to valid text rows, `diag(C_v)_i = Σ_k D[i,k]` and `diag(C_t)_k = Σ_i D[i,k]`.
/// The loss is `−½(mean log diag C_v + mean log diag C_t)`, averaged over layers and batch.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, records: &[AttentionRecord]) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::contract("cycle loss needs at least one interaction layer"));
    }
    let mut terms = Vec::with_capacity(records.len());
    for rec in records {
        let s = g.shape(rec.t_to_v).to_vec();
        let (b, nt, nv) = (s[0], s[1], s[2]);
        if g.shape(rec.v_to_t) != [b, nv, nt] || rec.text_valid.len() != b * nt {
            return Err(Error::shape(format!(
                "attention record: t→v {s:?}, v→t {:?}, mask {}",
                g.shape(rec.v_to_t),
                rec.text_valid.len()
            )));
        }
        let counts: Vec<usize> = rec.text_valid.chunks(nt).map(|c| c.iter().filter(|&&v| v).count()).collect();
        if counts.contains(&0) {
            return Err(Error::DegenerateInput("attention record with no valid text position".into()));
        }

        let back = g.permute(rec.v_to_t, &[0, 2, 1])?;
        let d = g.mul(rec.t_to_v, back)?;
        let row_mask = Tensor::from_fn(&[b, nt, nv], |i| {
            if rec.text_valid[i / nv] {
                T::one()
            } else {
                T::zero()
            }
        });
        let row_mask = g.constant(row_mask)?;
        let d = g.mul(d, row_mask)?;

        let diag_cv = g.reduce_axis(d, 2, 1.0)?;
        let log_cv = g.log_floor(diag_cv, CYCLE_FLOOR)?;
        let w_cv = Tensor::from_fn(&[b, nt], |i| {
            if rec.text_valid[i] {
                T::c(1.0 / counts[i / nt] as f64)
            } else {
                T::zero()
            }
        });
        let w_cv = g.constant(w_cv)?;
        let cv = g.mul(log_cv, w_cv)?;
        let cv = g.sum(cv)?;

        let diag_ct = g.reduce_axis(d, 1, 1.0)?;
        let log_ct = g.log_floor(diag_ct, CYCLE_FLOOR)?;
        let ct = g.sum(log_ct)?;
        let ct = g.mul_const(ct, T::c(1.0 / nv as f64))?;

        let layer = g.add(cv, ct)?;
        terms.push(g.mul_const(layer, T::c(-0.5 / b as f64))?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.mul_const(total, T::c(1.0 / records.len() as f64))
}

/// Mined negatives for both retrieval directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    /// For text anchor `i`, the index of its negative image.
    pub image_for_text: Vec<usize>,
    /// For image anchor `j`, the index of its negative text.
    pub text_for_image: Vec<usize>,
}

/// Most similar candidate still below the anchor's positive score; falls back to the
/// hardest candidate if none is below. Ties go to the smallest index.
pub fn semi_hard_index(scores: &[f64], anchor: usize) -> usize {
    let positive = scores[anchor];
    let pick = |pred: &dyn Fn(f64) -> bool| {
        let mut best: Option<usize> = None;
        for (j, &s) in scores.iter().enumerate() {
            if j == anchor || !pred(s) {
                continue;
            }
            if best.is_none_or(|b| s > scores[b]) {
                best = Some(j);
            }
        }
        best
    };
    pick(&|s| s < positive)
        .or_else(|| pick(&|_| true))
        .expect("at least two candidates")
}

/// Semi-hard negatives from a `[B, B]` text-by-image similarity matrix.
pub fn mine_semi_hard_negatives<T: Real>(s: &Tensor<T>) -> Result<Negatives> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("mining expects a square matrix, got {shape:?}")));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::contract("semi-hard mining needs at least two pairs"));
    }
    let image_for_text = (0..b)
        .map(|i| {
            let row: Vec<f64> = s.row(i).iter().map(|x| x.as_f64()).collect();
            semi_hard_index(&row, i)
        })
        .collect();
    let text_for_image = (0..b)
        .map(|j| {
            let col: Vec<f64> = (0..b).map(|i| s.data()[i * b + j].as_f64()).collect();
            semi_hard_index(&col, j)
        })
        .collect();
    Ok(Negatives { image_for_text, text_for_image })
}

/// Two-layer MLP scoring a `[p_t ; p_v]` concatenation.
#[derive(Clone, Debug)]
pub struct ItmHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ItmHead {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, group: &str, embed_dim: usize) -> Self {
        let d_in = 2 * embed_dim;
        ItmHead {
            w1: store.add(&format!("{group}.w1"), group, normal(rng, &[d_in, embed_dim], 1.0 / (d_in as f64).sqrt()), true),
            b1: store.add(&format!("{group}.b1"), group, Tensor::zeros(&[embed_dim]), false),
            w2: store.add(&format!("{group}.w2"), group, normal(rng, &[embed_dim, 1], 1.0 / (embed_dim as f64).sqrt()), true),
            b2: store.add(&format!("{group}.b2"), group, Tensor::zeros(&[1]), false),
        }
    }

    /// Logits `[n]` for `n` (text, image) embedding pairs.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, p: &Bound, p_t: Var, p_v: Var) -> Result<Var> {
        let x = g.concat_last(p_t, p_v)?;
        let h = g.linear(x, p.var(self.w1), Some(p.var(self.b1)))?;
        let h = g.gelu(h)?;
        let z = g.linear(h, p.var(self.w2), Some(p.var(self.b2)))?;
        let n = g.shape(z)[0];
        g.reshape(z, &[n])
    }
}

/// Mean binary cross-entropy of `logits` against constant 0/1 `labels`.
pub fn bce_with_logits<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(logits).numel();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logits, {} labels", labels.len())));
    }
    // softplus(z) − y·z
    let sp = g.softplus(logits)?;
    let y = g.constant(Tensor::from_f64(vec![n], labels)?)?;
    let yz = g.mul(logits, y)?;
    let per = g.sub(sp, yz)?;
    g.mean(per)
}

/// ITM loss with positives and negatives weighted equally regardless of their counts.
pub fn itm_loss<T: Real>(g: &mut Graph<T>, pos_logits: Var, neg_logits: Var) -> Result<Var> {
    let npos = g.value(pos_logits).numel();
    let nneg = g.value(neg_logits).numel();
    let pos = bce_with_logits(g, pos_logits, &vec![1.0; npos])?;
    let neg = bce_with_logits(g, neg_logits, &vec![0.0; nneg])?;
    let both = g.add(pos, neg)?;
    g.mul_const(both, T::c(0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `Σ λ_k L_k`
    Fixed,
    /// `Σ exp(−w_k) L_k + w_k` with learnable `w_k`.
    Learnable,
}

impl FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(WeightMode::Fixed),
            "learnable" => Ok(WeightMode::Learnable),
            other => Err(Error::config(format!("unknown loss weight mode `{other}`"))),
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Fixed => "fixed",
            WeightMode::Learnable => "learnable",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossWeights {
    pub mode: WeightMode,
    /// λ per [`LossKind`] (fixed mode).
    pub fixed: [f64; 4],
    /// Raw log-weights per [`LossKind`] (learnable mode).
    pub raw: Option<[ParamId; 4]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// (component, raw value, weighted contribution)
    pub components: Vec<(LossKind, f64, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn raw(&self, kind: LossKind) -> Option<f64> {
        self.components.iter().find(|c| c.0 == kind).map(|c| c.1)
    }

    /// `itc_uni=… itc_cross=… total=…`
    pub fn to_kv(&self) -> String {
        let mut parts: Vec<String> = self.components.iter().map(|(k, v, _)| format!("{k}={v:.6}")).collect();
        parts.push(format!("total={:.6}", self.total));
        parts.join(" ")
    }
}

/// Weighted sum of the enabled components.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    p: Option<&Bound>,
    components: &[(LossKind, Var)],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    if components.is_empty() {
        return Err(Error::config("no loss component is enabled"));
    }
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    for &(kind, l) in components {
        let raw = g.value(l).data()[0].as_f64();
        let term = match weights.mode {
            WeightMode::Fixed => g.mul_const(l, T::c(weights.fixed[kind.index()]))?,
            WeightMode::Learnable => {
                let ids = weights.raw.ok_or_else(|| Error::config("learnable weights without parameters"))?;
                let p = p.ok_or_else(|| Error::config("learnable weights need bound parameters"))?;
                let w = p.var(ids[kind.index()]);
                let neg = g.mul_const(w, -T::one())?;
                let scale = g.exp(neg)?;
                let scaled = g.scale_by(l, scale)?;
                g.add(scaled, w)?
            }
        };
        report.components.push((kind, raw, g.value(term).data()[0].as_f64()));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("non-empty");
    report.total = g.value(total).data()[0].as_f64();
    Ok((total, report))
}
