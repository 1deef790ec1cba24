//! Two-tower model with interaction blocks interleaved into the top encoder layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::bridge::{interaction_block, AttentionRecord, BridgeConfig, FusionVariant, InteractionBlockParams};
use crate::encoders::{Encoder, EncoderConfig, EncoderInput, HiddenStates, TokenBatch, LN_EPS};
use crate::error::{Error, Result};
use crate::objectives::{
    cycle_loss, itc_loss, itm_loss, mine_semi_hard_negatives, similarity, total_loss, ItmHead, LossKind, LossReport,
    LossWeights, WeightMode, TAU_MAX, TAU_MIN,
};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub text: EncoderConfig,
    pub vision: EncoderConfig,
    pub bridge: BridgeConfig,
    /// Width of every retrieval/fused embedding.
    pub embed_dim: usize,
    pub tau_init: f64,
    /// Enabled flag per [`LossKind`].
    pub losses: [bool; 4],
    pub weight_mode: WeightMode,
    /// λ per [`LossKind`] for fixed weighting; initial `w` is 0 in learnable mode.
    pub loss_lambdas: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let enc = |input| EncoderConfig { layers: 4, width: 32, heads: 4, ffn_mult: 2, max_positions: 16, input };
        ModelConfig {
            text: enc(EncoderInput::Tokens { vocab_size: 80 }),
            vision: enc(EncoderInput::Patches { patch_dim: 12 }),
            bridge: BridgeConfig { d_s: 32, ..BridgeConfig::default() },
            embed_dim: 32,
            tau_init: crate::objectives::TAU_INIT,
            losses: [true; 4],
            weight_mode: WeightMode::Learnable,
            loss_lambdas: [1.0; 4],
        }
    }
}

impl ModelConfig {
    /// Checks cross-module consistency and returns the interaction indices.
    pub fn validate(&self) -> Result<Vec<usize>> {
        self.text.validate()?;
        self.vision.validate()?;
        if !matches!(self.text.input, EncoderInput::Tokens { .. }) || !matches!(self.vision.input, EncoderInput::Patches { .. }) {
            return Err(Error::config("text encoder must take tokens and vision encoder patches"));
        }
        if self.text.layers != self.vision.layers {
            return Err(Error::config(format!(
                "encoders must have equal depth to interleave ({} vs {})",
                self.text.layers, self.vision.layers
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be positive"));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::config(format!("tau_init {} outside [{TAU_MIN}, {TAU_MAX}]", self.tau_init)));
        }
        if !self.losses.iter().any(|&on| on) {
            return Err(Error::config("no loss component is enabled"));
        }
        if self.weight_mode == WeightMode::Fixed && self.loss_lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::config("fixed loss weights must be positive"));
        }
        self.bridge.validate(self.text.layers)
    }

    pub fn enabled_losses(&self) -> Vec<LossKind> {
        LossKind::ALL.into_iter().filter(|k| self.losses[k.index()]).collect()
    }
}

/// LayerNorm, bias-free projection to the embedding width, then unit-normalization.
#[derive(Clone, Debug)]
pub struct Head {
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub w: ParamId,
}

impl Head {
    fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, group: &str, d_in: usize, d_out: usize) -> Self {
        Head {
            ln_g: store.add(&format!("{name}.ln.g"), group, Tensor::full(&[d_in], T::one()), false),
            ln_b: store.add(&format!("{name}.ln.b"), group, Tensor::zeros(&[d_in]), false),
            w: store.add(&format!("{name}.w"), group, normal(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt()), true),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let x = g.layer_norm(x, p.var(self.ln_g), p.var(self.ln_b), LN_EPS)?;
        let x = g.matmul(x, p.var(self.w))?;
        g.l2_normalize(x)
    }
}

/// A batch of aligned (image, caption) pairs.
#[derive(Clone, Debug)]
pub struct PairBatch<T> {
    /// `[B, N_v, patch_dim]`
    pub patches: Tensor<T>,
    pub tokens: TokenBatch,
}

impl<T: Real> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.tokens.batch
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.batch == 0
    }
}

/// States of both towers up to and including the tap layer.
#[derive(Clone, Debug)]
pub struct Lower {
    pub vision: Vec<Var>,
    pub text: Vec<Var>,
    pub text_valid: Vec<bool>,
}

/// Everything above the tap layer.
#[derive(Clone, Debug)]
pub struct Upper {
    /// States for layers `tap..=L`; the first entry is post-interaction if a block sits at the tap.
    pub vision: Vec<Var>,
    pub text: Vec<Var>,
    pub records: Vec<AttentionRecord>,
    /// Cross-fused pooled embeddings `[B, d_e]`.
    pub fused_v: Var,
    pub fused_t: Var,
}

#[derive(Clone, Debug)]
pub struct BridgedOutput {
    pub vision: HiddenStates,
    pub text: HiddenStates,
    pub records: Vec<AttentionRecord>,
    pub uni_v: Var,
    pub uni_t: Var,
    pub fused_v: Var,
    pub fused_t: Var,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct BridgeModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: Encoder,
    pub vision: Encoder,
    /// 1-based layer indices after which an interaction block runs.
    pub indices: Vec<usize>,
    pub blocks: Vec<InteractionBlockParams>,
    pub uni_t: Head,
    pub uni_v: Head,
    pub pooled_t: Head,
    pub pooled_v: Head,
    pub itm: ItmHead,
    pub log_tau: ParamId,
    pub loss_weights: [ParamId; 4],
}

/// Masked mean over the sequence axis: `[B, N, d]` to `[B, d]`.
pub fn masked_mean_pool<T: Real>(g: &mut Graph<T>, h: Var, valid: Option<&[bool]>) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let w = match valid {
        None => Tensor::full(&[b, 1, n], T::c(1.0 / n as f64)),
        Some(v) => {
            let mut w = vec![T::zero(); b * n];
            for (bi, row) in v.chunks(n).enumerate() {
                let count = row.iter().filter(|&&x| x).count();
                if count == 0 {
                    return Err(Error::DegenerateInput(format!("sequence {bi} has no valid position to pool")));
                }
                for (j, &ok) in row.iter().enumerate() {
                    if ok {
                        w[bi * n + j] = T::c(1.0 / count as f64);
                    }
                }
            }
            Tensor::new(vec![b, 1, n], w)?
        }
    };
    let w = g.constant(w)?;
    let pooled = g.bmm(w, h, false)?;
    g.reshape(pooled, &[b, d])
}

impl<T: Real> BridgeModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let indices = config.validate()?;
        let mut store = ParamStore::new();
        let text = Encoder::init(&mut store, rng, "text", config.text.clone())?;
        let vision = Encoder::init(&mut store, rng, "vision", config.vision.clone())?;
        let (d_t, d_v, d_e) = (config.text.width, config.vision.width, config.embed_dim);
        let uni_t = Head::init(&mut store, rng, "heads.unimodal.text", "heads.unimodal", d_t, d_e);
        let uni_v = Head::init(&mut store, rng, "heads.unimodal.vision", "heads.unimodal", d_v, d_e);
        let pooled_t = Head::init(&mut store, rng, "heads.pooled.text", "heads.pooled", d_t, d_e);
        let pooled_v = Head::init(&mut store, rng, "heads.pooled.vision", "heads.pooled", d_v, d_e);
        let itm = ItmHead::init(&mut store, rng, "heads.itm", d_e);
        let log_tau = store.add("tau.log", "tau", Tensor::scalar(T::c(config.tau_init.ln())), false);
        let loss_weights =
            LossKind::ALL.map(|k| store.add(&format!("loss_weights.{k}"), "loss_weights", Tensor::scalar(T::zero()), false));
        // Blocks come last so every variant shares the same draws for everything else.
        let count = match config.bridge.fusion {
            FusionVariant::None => 0,
            FusionVariant::PooledOnly => 1,
            FusionVariant::CrossOnly | FusionVariant::SelfPlusCross => indices.len(),
        };
        let with_self = config.bridge.fusion == FusionVariant::SelfPlusCross;
        let blocks = (1..=count)
            .map(|q| {
                let prefix = format!("bridge.block{q}");
                InteractionBlockParams::init(&mut store, rng, &prefix, "bridge.gates", d_v, d_t, &config.bridge, with_self)
            })
            .collect();
        Ok(BridgeModel {
            config,
            store,
            text,
            vision,
            indices,
            blocks,
            uni_t,
            uni_v,
            pooled_t,
            pooled_v,
            itm,
            log_tau,
            loss_weights,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.text.num_layers()
    }

    /// Layer whose output feeds the unimodal heads: the first interaction index.
    pub fn tap(&self) -> usize {
        self.indices[0]
    }

    fn token_variant(&self) -> bool {
        matches!(self.config.bridge.fusion, FusionVariant::CrossOnly | FusionVariant::SelfPlusCross)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            mode: self.config.weight_mode,
            fixed: self.config.loss_lambdas,
            raw: Some(self.loss_weights),
        }
    }

    /// Clamps the temperature into its allowed range.
    pub fn clamp_tau(&mut self) {
        let (lo, hi) = (T::c(TAU_MIN.ln()), T::c(TAU_MAX.ln()));
        let v = &mut self.store.get_mut(self.log_tau).value.data_mut()[0];
        *v = v.max(lo).min(hi);
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).value.data()[0].as_f64().exp()
    }

    /// Embedding outputs of both towers.
    pub fn embed(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<(Var, Var)> {
        let patches = g.constant(batch.patches.clone())?;
        let x_v = self.vision.embed_patches(g, p, patches)?;
        let x_t = self.text.embed_tokens(g, p, &batch.tokens)?;
        if g.shape(x_v)[0] != g.shape(x_t)[0] {
            return Err(Error::shape("image and caption batch sizes differ"));
        }
        Ok((x_v, x_t))
    }

    /// Both towers with no cross-modal interaction.
    pub fn encode_plain(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<(HiddenStates, HiddenStates)> {
        let (x_v, x_t) = self.embed(g, p, batch)?;
        let hv = self.vision.encode(g, p, x_v, None)?;
        let ht = self.text.encode(g, p, x_t, Some(&batch.tokens.valid))?;
        Ok((hv, ht))
    }

    /// Layers `1..=tap` of both towers.
    pub fn lower(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<Lower> {
        let (mut hv, mut ht) = self.embed(g, p, batch)?;
        let valid = &batch.tokens.valid;
        let mut vision = vec![hv];
        let mut text = vec![ht];
        for l in 1..=self.tap() {
            hv = self.vision.layer(g, p, l, hv, None)?;
            ht = self.text.layer(g, p, l, ht, Some(valid))?;
            vision.push(hv);
            text.push(ht);
        }
        Ok(Lower { vision, text, text_valid: valid.clone() })
    }

    /// Retrieval embeddings `(P_v^u, P_t^u)` from the tap states.
    pub fn unimodal_heads(&self, g: &mut Graph<T>, p: &Bound, h_v: Var, h_t: Var, text_valid: &[bool]) -> Result<(Var, Var)> {
        let pv = masked_mean_pool(g, h_v, None)?;
        let pt = masked_mean_pool(g, h_t, Some(text_valid))?;
        Ok((self.uni_v.apply(g, p, pv)?, self.uni_t.apply(g, p, pt)?))
    }

    /// Bi-encoder retrieval path. Never touches an interaction block.
    pub fn unimodal_embeddings(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<(Var, Var)> {
        let low = self.lower(g, p, batch)?;
        let tap = self.tap();
        self.unimodal_heads(g, p, low.vision[tap], low.text[tap], &low.text_valid)
    }

    /// Layers above the tap with interaction blocks, then the pooled heads.
    pub fn upper(&self, g: &mut Graph<T>, p: &Bound, h_v: Var, h_t: Var, text_valid: &[bool]) -> Result<Upper> {
        let tap = self.tap();
        let dropout = self.config.bridge.dropout;
        let (mut hv, mut ht) = (h_v, h_t);
        let mut vision = Vec::new();
        let mut text = Vec::new();
        let mut records = Vec::new();
        for l in tap..=self.num_layers() {
            if l > tap {
                hv = self.vision.layer(g, p, l, hv, None)?;
                ht = self.text.layer(g, p, l, ht, Some(text_valid))?;
            }
            if self.token_variant() {
                if let Some(q) = self.indices.iter().position(|&i| i == l) {
                    let (v, t, rec) = interaction_block(g, p, &self.blocks[q], hv, ht, Some(text_valid), dropout)?;
                    hv = v;
                    ht = t;
                    records.push(rec);
                }
            }
            vision.push(hv);
            text.push(ht);
        }
        let mut pv = masked_mean_pool(g, hv, None)?;
        let mut pt = masked_mean_pool(g, ht, Some(text_valid))?;
        if self.config.bridge.fusion == FusionVariant::PooledOnly {
            let b = g.shape(pv)[0];
            let sv = g.reshape(pv, &[b, 1, self.vision.width()])?;
            let st = g.reshape(pt, &[b, 1, self.text.width()])?;
            let (v, t, rec) = interaction_block(g, p, &self.blocks[0], sv, st, None, dropout)?;
            pv = g.reshape(v, &[b, self.vision.width()])?;
            pt = g.reshape(t, &[b, self.text.width()])?;
            records.push(rec);
        }
        let fused_v = self.pooled_v.apply(g, p, pv)?;
        let fused_t = self.pooled_t.apply(g, p, pt)?;
        Ok(Upper { vision, text, records, fused_v, fused_t })
    }

    /// Full forward pass with fusion.
    pub fn bridged_encode(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<BridgedOutput> {
        let low = self.lower(g, p, batch)?;
        let tap = self.tap();
        let (uni_v, uni_t) = self.unimodal_heads(g, p, low.vision[tap], low.text[tap], &low.text_valid)?;
        let up = self.upper(g, p, low.vision[tap], low.text[tap], &low.text_valid)?;
        let join = |lower: &[Var], upper: &[Var]| lower[..tap].iter().chain(upper).copied().collect::<Vec<_>>();
        Ok(BridgedOutput {
            vision: HiddenStates { layers: join(&low.vision, &up.vision), valid: None },
            text: HiddenStates { layers: join(&low.text, &up.text), valid: Some(low.text_valid.clone()) },
            records: up.records,
            uni_v,
            uni_t,
            fused_v: up.fused_v,
            fused_t: up.fused_t,
        })
    }

    /// Weighted training objective over the enabled components.
    pub fn loss(&self, g: &mut Graph<T>, p: &Bound, batch: &PairBatch<T>) -> Result<LossOutput> {
        let low = self.lower(g, p, batch)?;
        let tap = self.tap();
        let (hv, ht) = (low.vision[tap], low.text[tap]);
        let log_tau = p.var(self.log_tau);
        let enabled = self.config.enabled_losses();
        let wants = |k| enabled.contains(&k);

        let mut parts = Vec::new();
        if wants(LossKind::ItcUni) {
            let (uv, ut) = self.unimodal_heads(g, p, hv, ht, &low.text_valid)?;
            parts.push((LossKind::ItcUni, itc_loss(g, ut, uv, log_tau)?));
        }
        let needs_upper = wants(LossKind::ItcCross) || wants(LossKind::Itm) || wants(LossKind::Cyc);
        if needs_upper {
            let up = self.upper(g, p, hv, ht, &low.text_valid)?;
            if wants(LossKind::ItcCross) {
                parts.push((LossKind::ItcCross, itc_loss(g, up.fused_t, up.fused_v, log_tau)?));
            }
            if wants(LossKind::Itm) {
                let s = similarity(g, up.fused_t, up.fused_v, log_tau)?;
                let neg = mine_semi_hard_negatives(g.value(s))?;
                let b = batch.len();
                let v_idx: Vec<usize> = neg.image_for_text.iter().copied().chain(0..b).collect();
                let t_idx: Vec<usize> = (0..b).chain(neg.text_for_image.iter().copied()).collect();
                let hv_neg = g.index_select(hv, &v_idx)?;
                let ht_neg = g.index_select(ht, &t_idx)?;
                let tokens_neg = batch.tokens.select(&t_idx);
                let up_neg = self.upper(g, p, hv_neg, ht_neg, &tokens_neg.valid)?;
                let pos = self.itm.logits(g, p, up.fused_t, up.fused_v)?;
                let negl = self.itm.logits(g, p, up_neg.fused_t, up_neg.fused_v)?;
                parts.push((LossKind::Itm, itm_loss(g, pos, negl)?));
            }
            if wants(LossKind::Cyc) && !up.records.is_empty() {
                parts.push((LossKind::Cyc, cycle_loss(g, &up.records)?));
            }
        }
        let (total, report) = total_loss(g, Some(p), &parts, &self.weights())?;
        Ok(LossOutput { total, report })
    }

    /// Number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{cross_attention_calls, reset_cross_attention_calls, Placement};
    use crate::encoders::EncoderInput;
    use crate::gradcheck::{finite_diff_check, Coordinates};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_config(fusion: FusionVariant) -> ModelConfig {
        let enc = |input| EncoderConfig { layers: 4, width: 16, heads: 2, ffn_mult: 2, max_positions: 8, input };
        ModelConfig {
            text: enc(EncoderInput::Tokens { vocab_size: 12 }),
            vision: enc(EncoderInput::Patches { patch_dim: 6 }),
            bridge: BridgeConfig { q: 2, placement: Placement::Late, d_s: 8, h_s: 2, fusion, gate_init: -4.0, dropout: 0.0 },
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, nv: usize, pd: usize, vocab: usize) -> PairBatch<f64> {
        let seqs: Vec<Vec<usize>> = (0..b)
            .map(|i| (0..(3 + i % 3)).map(|_| rng.random_range(1..vocab)).collect())
            .collect();
        PairBatch { patches: normal(rng, &[b, nv, pd], 1.0), tokens: TokenBatch::from_sequences(&seqs).unwrap() }
    }

    fn setup(cfg: ModelConfig, seed: u64) -> (BridgeModel<f64>, PairBatch<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = BridgeModel::new(cfg, &mut rng).unwrap();
        let b = batch(&mut rng, 3, 5, 6, 12);
        (m, b)
    }

    fn set_gates(m: &mut BridgeModel<f64>, raw: f64) {
        for blk in m.blocks.clone() {
            m.store.get_mut(blk.gate_t).value = Tensor::scalar(raw);
            m.store.get_mut(blk.gate_v).value = Tensor::scalar(raw);
        }
    }

    #[test]
    fn late_placement_records_two_layers() {
        let (m, b) = setup(micro_config(FusionVariant::CrossOnly), 1);
        assert_eq!(m.indices, vec![3, 4]);
        assert_eq!(m.tap(), 3);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).unwrap();
        reset_cross_attention_calls();
        let out = m.bridged_encode(&mut g, &p, &b).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(cross_attention_calls(), 4);
        assert_eq!(out.vision.layers.len(), 5);
        for rec in &out.records {
            for v in [rec.t_to_v, rec.v_to_t] {
                let t = g.value(v);
                for row in t.data().chunks(t.last_dim()) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
            // padded text keys receive exactly zero mass
            let vt = g.value(rec.v_to_t);
            let nt = b.tokens.len;
            for (i, &x) in vt.data().iter().enumerate() {
                let bi = i / (5 * nt);
                if !b.tokens.valid[bi * nt + i % nt] {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn none_variant_is_bitwise_plain_encode() {
        let (m, b) = setup(micro_config(FusionVariant::None), 2);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).unwrap();
        let out = m.bridged_encode(&mut g, &p, &b).unwrap();
        let (hv, ht) = m.encode_plain(&mut g, &p, &b).unwrap();
        assert!(out.records.is_empty());
        for l in 0..=4 {
            assert_eq!(g.value(out.vision.layers[l]).data(), g.value(hv.layers[l]).data());
            assert_eq!(g.value(out.text.layers[l]).data(), g.value(ht.layers[l]).data());
        }
    }

    #[test]
    fn closed_gates_match_plain_encode() {
        for fusion in [FusionVariant::CrossOnly, FusionVariant::SelfPlusCross] {
            let (mut m, b) = setup(micro_config(fusion), 3);
            set_gates(&mut m, -40.0);
            let mut g = Graph::new();
            let p = m.store.bind(&mut g).unwrap();
            let out = m.bridged_encode(&mut g, &p, &b).unwrap();
            let (hv, ht) = m.encode_plain(&mut g, &p, &b).unwrap();
            for l in 0..=4 {
                assert!(g.value(out.vision.layers[l]).max_abs_diff(g.value(hv.layers[l])) < 1e-6);
                assert!(g.value(out.text.layers[l]).max_abs_diff(g.value(ht.layers[l])) < 1e-6);
            }
        }
    }

    #[test]
    fn text_depends_on_image_only_through_interaction() {
        let run = |fusion, perturb: bool| {
            let (m, mut b) = setup(micro_config(fusion), 4);
            if perturb {
                b.patches.data_mut().iter_mut().for_each(|x| *x += 0.5);
            }
            let mut g = Graph::new();
            let p = m.store.bind(&mut g).unwrap();
            let out = m.bridged_encode(&mut g, &p, &b).unwrap();
            g.value(out.text.last()).clone()
        };
        assert_eq!(run(FusionVariant::None, false).data(), run(FusionVariant::None, true).data());
        assert!(run(FusionVariant::CrossOnly, false).max_abs_diff(&run(FusionVariant::CrossOnly, true)) > 1e-6);
    }

    #[test]
    fn retrieval_path_matches_bridged_and_skips_cross_attention() {
        let (m, b) = setup(micro_config(FusionVariant::CrossOnly), 5);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).unwrap();
        reset_cross_attention_calls();
        let (uv, ut) = m.unimodal_embeddings(&mut g, &p, &b).unwrap();
        assert_eq!(cross_attention_calls(), 0);
        let out = m.bridged_encode(&mut g, &p, &b).unwrap();
        assert!(g.value(uv).max_abs_diff(g.value(out.uni_v)) < 1e-9);
        assert!(g.value(ut).max_abs_diff(g.value(out.uni_t)) < 1e-9);
    }

    #[test]
    fn retrieval_ignores_bridge_parameters() {
        let (mut m, b) = setup(micro_config(FusionVariant::CrossOnly), 6);
        let embed = |m: &BridgeModel<f64>| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g).unwrap();
            let (uv, ut) = m.unimodal_embeddings(&mut g, &p, &b).unwrap();
            (g.value(uv).clone(), g.value(ut).clone())
        };
        let before = embed(&m);
        for prm in m.store.iter_mut().filter(|p| p.group.starts_with("bridge.")) {
            prm.value.data_mut().iter_mut().for_each(|x| *x = *x * 1.5 + 0.3);
        }
        let after = embed(&m);
        assert_eq!(before.0.data(), after.0.data());
        assert_eq!(before.1.data(), after.1.data());
    }

    #[test]
    fn parameter_count_grows_with_q() {
        let count = |q| {
            let mut cfg = micro_config(FusionVariant::CrossOnly);
            cfg.text.layers = 6;
            cfg.vision.layers = 6;
            cfg.bridge.q = q;
            BridgeModel::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().num_parameters()
        };
        let (c2, c4, c6) = (count(2), count(4), count(6));
        assert!(c6 > c4 && c4 > c2, "{c2} {c4} {c6}");
    }

    #[test]
    fn pooled_only_records_single_step() {
        let (m, b) = setup(micro_config(FusionVariant::PooledOnly), 7);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).unwrap();
        let out = m.bridged_encode(&mut g, &p, &b).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(g.shape(out.records[0].t_to_v), &[3, 1, 1]);
        assert_eq!(g.shape(out.fused_v), &[3, 8]);
    }

    #[test]
    fn loss_runs_for_every_variant() {
        for fusion in FusionVariant::ALL {
            let (m, b) = setup(micro_config(fusion), 8);
            let mut g = Graph::new();
            let p = m.store.bind(&mut g).unwrap();
            let out = m.loss(&mut g, &p, &b).unwrap();
            let expected = if fusion == FusionVariant::None { 3 } else { 4 };
            assert_eq!(out.report.components.len(), expected, "{fusion}");
            assert!(out.report.total.is_finite());
        }
    }

    /// Loss with every component on, as a function of all parameters.
    fn total_of(m: &BridgeModel<f64>, b: &PairBatch<f64>, values: &[Tensor<f64>]) -> Result<f64> {
        let mut m = m.clone();
        for (prm, v) in m.store.iter_mut().zip(values) {
            prm.value = v.clone();
        }
        let mut g = Graph::new();
        let p = m.store.bind(&mut g)?;
        let out = m.loss(&mut g, &p, b)?;
        Ok(g.value(out.total).data()[0])
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut cfg = micro_config(FusionVariant::CrossOnly);
        cfg.text.layers = 2;
        cfg.vision.layers = 2;
        cfg.bridge.gate_init = 0.0;
        let (mut m, b) = setup(cfg, 9);
        m.store.set_all_trainable(true);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g).unwrap();
        let out = m.loss(&mut g, &p, &b).unwrap();
        assert_eq!(out.report.components.len(), 4);
        let grads = g.backward(out.total).unwrap();
        let values: Vec<Tensor<f64>> = m.store.iter().map(|p| p.value.clone()).collect();
        let analytic: Vec<Tensor<f64>> = m
            .store
            .iter()
            .zip(p.vars())
            .map(|(prm, &v)| grads.get(v).unwrap_or_else(|| Tensor::zeros(prm.value.shape())))
            .collect();
        let r = finite_diff_check(
            |vals| total_of(&m, &b, vals),
            &values,
            &analytic,
            1e-5,
            1e-4,
            Coordinates::Sample { per_tensor: 3, seed: 1 },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
