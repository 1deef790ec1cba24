//! Pre-norm transformer encoder stacks for the two modalities.
//!
//! These stand in for pretrained vision and text backbones: same layer
//! structure, toy width. Each stack exposes every intermediate hidden state
//! so the bridge can intercept them.

use rand::Rng;

use crate::attention::{multi_head_attention, AttnParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Reserved padding token id.
pub const PAD_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderInput {
    Tokens { vocab_size: usize },
    Patches { patch_dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    pub input: EncoderInput,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 || self.max_positions == 0 {
            return Err(Error::config(format!("encoder sizes must be positive: {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        match self.input {
            EncoderInput::Tokens { vocab_size: 0 } | EncoderInput::Patches { patch_dim: 0 } => {
                Err(Error::config("encoder input size must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-layer activations of one modality for a batch.
///
/// `layers[0]` is the embedding output, `layers[l]` the output of block `l`.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    pub layers: Vec<Var>,
    /// `B * N` flags, row-major by example; `None` means every position is valid.
    pub valid: Option<Vec<bool>>,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least the embedding layer")
    }
}

/// Right-padded token batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Pads each sequence with [`PAD_ID`] to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::DegenerateInput("empty token batch".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::DegenerateInput("every sequence is empty".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, len - s.len()));
            valid.extend(std::iter::repeat_n(false, len - s.len()));
        }
        Ok(TokenBatch { ids, batch: seqs.len(), len, valid })
    }

    pub fn select(&self, idx: &[usize]) -> TokenBatch {
        let mut ids = Vec::with_capacity(idx.len() * self.len);
        let mut valid = Vec::with_capacity(idx.len() * self.len);
        for &i in idx {
            ids.extend_from_slice(&self.ids[i * self.len..(i + 1) * self.len]);
            valid.extend_from_slice(&self.valid[i * self.len..(i + 1) * self.len]);
        }
        TokenBatch { ids, batch: idx.len(), len: self.len, valid }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub attn: AttnParams,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
enum Embedding {
    Token { table: ParamId },
    Patch { w: ParamId, b: ParamId },
}

/// One modality's encoder stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    embed: Embedding,
    pub pos: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

impl Encoder {
    /// Registers parameters under `prefix` (`text` or `vision`).
    ///
    /// Groups: `{prefix}.embed`, `{prefix}.pos`, `{prefix}.layer{l}` for l in 1..=L.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        config: EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let embed_group = format!("{prefix}.embed");
        let embed = match config.input {
            EncoderInput::Tokens { vocab_size } => Embedding::Token {
                table: store.add(&format!("{prefix}.embed.table"), &embed_group, normal(rng, &[vocab_size, d], 1.0), true),
            },
            EncoderInput::Patches { patch_dim } => Embedding::Patch {
                w: store.add(
                    &format!("{prefix}.embed.w"),
                    &embed_group,
                    normal(rng, &[patch_dim, d], 1.0 / (patch_dim as f64).sqrt()),
                    true,
                ),
                b: store.add(&format!("{prefix}.embed.b"), &embed_group, Tensor::zeros(&[d]), false),
            },
        };
        let pos = store.add(
            &format!("{prefix}.pos"),
            &format!("{prefix}.pos"),
            normal(rng, &[config.max_positions, d], 0.02),
            true,
        );
        let hidden = d * config.ffn_mult;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            let group = format!("{prefix}.layer{l}");
            let name = |n: &str| format!("{group}.{n}");
            let ln1_g = store.add(&name("ln1.g"), &group, Tensor::full(&[d], T::one()), false);
            let ln1_b = store.add(&name("ln1.b"), &group, Tensor::zeros(&[d]), false);
            let attn = AttnParams::init(store, rng, &name("attn"), &group, d, config.heads, true);
            let ln2_g = store.add(&name("ln2.g"), &group, Tensor::full(&[d], T::one()), false);
            let ln2_b = store.add(&name("ln2.b"), &group, Tensor::zeros(&[d]), false);
            let w1 = store.add(&name("ffn.w1"), &group, normal(rng, &[d, hidden], 1.0 / (d as f64).sqrt()), true);
            let b1 = store.add(&name("ffn.b1"), &group, Tensor::zeros(&[hidden]), false);
            let w2 = store.add(
                &name("ffn.w2"),
                &group,
                normal(rng, &[hidden, d], 1.0 / (hidden as f64).sqrt()),
                true,
            );
            let b2 = store.add(&name("ffn.b2"), &group, Tensor::zeros(&[d]), false);
            layers.push(EncoderLayerParams { ln1_g, ln1_b, attn, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        Ok(Encoder { config, prefix: prefix.to_string(), embed, pos, layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    fn add_positions<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, batch: usize, n: usize) -> Result<Var> {
        if n > self.config.max_positions {
            return Err(Error::shape(format!(
                "sequence of {n} exceeds {} positions",
                self.config.max_positions
            )));
        }
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.index_select(p.var(self.pos), &idx)?;
        let pos = g.reshape(pos, &[batch, n, self.config.width])?;
        g.add(x, pos)
    }

    /// Token embedding plus learned positional embedding, `[B, N_t, d]`.
    pub fn embed_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Bound, tokens: &TokenBatch) -> Result<Var> {
        let Embedding::Token { table } = self.embed else {
            return Err(Error::config(format!("{} encoder does not take tokens", self.prefix)));
        };
        let EncoderInput::Tokens { vocab_size } = self.config.input else { unreachable!() };
        if let Some(&id) = tokens.ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocab { id, vocab: vocab_size });
        }
        let x = g.index_select(p.var(table), &tokens.ids)?;
        let x = g.reshape(x, &[tokens.batch, tokens.len, self.config.width])?;
        self.add_positions(g, p, x, tokens.batch, tokens.len)
    }

    /// Linear patch projection plus learned positional embedding, `[B, N_v, d]`.
    pub fn embed_patches<T: Real>(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<Var> {
        let Embedding::Patch { w, b } = self.embed else {
            return Err(Error::config(format!("{} encoder does not take patches", self.prefix)));
        };
        let EncoderInput::Patches { patch_dim } = self.config.input else { unreachable!() };
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[2] != patch_dim {
            return Err(Error::shape(format!("patches {s:?}, expected [B, N, {patch_dim}]")));
        }
        let x = g.linear(patches, p.var(w), Some(p.var(b)))?;
        self.add_positions(g, p, x, s[0], s[1])
    }

    /// One pre-norm block: `h + MHA(LN(h))`, then `h + FFN(LN(h))`.
    pub fn layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        index: usize,
        h: Var,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let lp = self
            .layers
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no encoder layer {index}")))?;
        encoder_layer(g, p, lp, h, valid)
    }

    /// Runs the whole stack with no cross-modal input. Returns L + 1 states.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x0: Var, valid: Option<&[bool]>) -> Result<HiddenStates> {
        let mut layers = vec![x0];
        let mut h = x0;
        for l in 1..=self.num_layers() {
            h = self.layer(g, p, l, h, valid)?;
            layers.push(h);
        }
        Ok(HiddenStates { layers, valid: valid.map(<[bool]>::to_vec) })
    }
}

pub fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    lp: &EncoderLayerParams,
    h: Var,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("encoder layer expects [B, N, d], got {s:?}")));
    }
    if let Some(v) = valid {
        if v.len() != s[0] * s[1] {
            return Err(Error::shape(format!("mask of {} for states {s:?}", v.len())));
        }
        for (bi, row) in v.chunks(s[1]).enumerate() {
            if !row.iter().any(|&x| x) {
                return Err(Error::DegenerateInput(format!("sequence {bi} is fully masked")));
            }
        }
    }
    let x = g.layer_norm(h, p.var(lp.ln1_g), p.var(lp.ln1_b), LN_EPS)?;
    let (a, _) = multi_head_attention(g, p, &lp.attn, x, x, valid, 0.0)?;
    let h = g.add(h, a)?;
    let x = g.layer_norm(h, p.var(lp.ln2_g), p.var(lp.ln2_b), LN_EPS)?;
    let f = g.linear(x, p.var(lp.w1), Some(p.var(lp.b1)))?;
    let f = g.gelu(f)?;
    let f = g.linear(f, p.var(lp.w2), Some(p.var(lp.b2)))?;
    g.add(h, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn text_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            width: 16,
            heads: 4,
            ffn_mult: 2,
            max_positions: 8,
            input: EncoderInput::Tokens { vocab_size: 20 },
        }
    }

    fn vision_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            width: 16,
            heads: 4,
            ffn_mult: 2,
            max_positions: 9,
            input: EncoderInput::Patches { patch_dim: 6 },
        }
    }

    fn build(cfg: EncoderConfig, prefix: &str, seed: u64) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::init(&mut store, &mut rng, prefix, cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn embed_tokens_shape_and_zero_table() {
        let (mut store, enc) = build(
            EncoderConfig { width: 16, max_positions: 12, ..text_cfg() },
            "text",
            1,
        );
        let tokens = TokenBatch::from_sequences(&[vec![3, 4, 5, 6]]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = enc.embed_tokens(&mut g, &p, &tokens).unwrap();
        assert_eq!(g.shape(x), &[1, 4, 16]);

        for prm in store.iter_mut() {
            if prm.group == "text.embed" || prm.group == "text.pos" {
                prm.value = Tensor::zeros(prm.value.shape());
            }
        }
        let tokens = TokenBatch::from_sequences(&[vec![0, 0]]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = enc.embed_tokens(&mut g, &p, &tokens).unwrap();
        let v = g.value(x);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn embed_tokens_rejects_out_of_vocab() {
        let (store, enc) = build(text_cfg(), "text", 1);
        let tokens = TokenBatch::from_sequences(&[vec![3, 20]]).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        assert!(matches!(enc.embed_tokens(&mut g, &p, &tokens), Err(Error::Vocab { id: 20, vocab: 20 })));
    }

    #[test]
    fn embed_patches_cases() {
        let (mut store, enc) = build(vision_cfg(), "vision", 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patches: Tensor<f64> = normal(&mut rng, &[1, 9, 6], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.constant(patches.clone()).unwrap();
        let e = enc.embed_patches(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(e), &[1, 9, 16]);
        let bad = g.constant(Tensor::zeros(&[1, 9, 5])).unwrap();
        assert!(matches!(enc.embed_patches(&mut g, &p, bad), Err(Error::Shape(_))));

        // zero positions: permuting patches permutes the embedded rows
        let pos = store.id("vision.pos").unwrap();
        store.get_mut(pos).value = Tensor::zeros(&[9, 16]);
        let perm = [4, 0, 8, 1, 7, 2, 6, 3, 5];
        let permuted = Tensor::from_fn(&[1, 9, 6], |i| patches.data()[perm[i / 6] * 6 + i % 6]);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let a = g.constant(patches.clone()).unwrap();
        let b = g.constant(permuted.clone()).unwrap();
        let ea = enc.embed_patches(&mut g, &p, a).unwrap();
        let eb = enc.embed_patches(&mut g, &p, b).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(g.value(eb).row(i), g.value(ea).row(src));
        }

        // with positions left in place the permutation is no longer equivariant
        let (store, enc) = build(vision_cfg(), "vision", 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let a = g.constant(patches).unwrap();
        let b = g.constant(permuted).unwrap();
        let ea = enc.embed_patches(&mut g, &p, a).unwrap();
        let eb = enc.embed_patches(&mut g, &p, b).unwrap();
        assert_ne!(g.value(eb).row(0), g.value(ea).row(perm[0]));
    }

    #[test]
    fn zero_layer_is_identity() {
        let (mut store, enc) = build(vision_cfg(), "vision", 3);
        for prm in store.iter_mut() {
            if prm.group == "vision.layer1" {
                prm.value = Tensor::zeros(prm.value.shape());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let h = g.constant(normal(&mut rng, &[2, 9, 16], 1.0)).unwrap();
        let out = enc.layer(&mut g, &p, 1, h, None).unwrap();
        assert_eq!(g.shape(out), &[2, 9, 16]);
        assert_eq!(g.value(out), g.value(h));
    }

    #[test]
    fn masked_positions_do_not_leak() {
        let (store, enc) = build(text_cfg(), "text", 5);
        let a = TokenBatch::from_sequences(&[vec![3, 4, 5], vec![7, 8, 9, 10, 11]]).unwrap();
        let mut b = a.clone();
        // perturb the padded slots of the first sequence
        b.ids[3] = 17;
        b.ids[4] = 2;
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let xa = enc.embed_tokens(&mut g, &p, &a).unwrap();
        let xb = enc.embed_tokens(&mut g, &p, &b).unwrap();
        let ha = enc.encode(&mut g, &p, xa, Some(&a.valid)).unwrap();
        let hb = enc.encode(&mut g, &p, xb, Some(&b.valid)).unwrap();
        assert_eq!(ha.layers.len(), 3);
        let (va, vb) = (g.value(ha.last()), g.value(hb.last()));
        for row in 0..3 {
            let diff = va.row(row).iter().zip(vb.row(row)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9, "row {row} moved by {diff}");
        }
        assert_ne!(va.row(3), vb.row(3));
    }

    #[test]
    fn fully_masked_sequence_is_rejected() {
        let (store, enc) = build(text_cfg(), "text", 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let h = g.constant(Tensor::zeros(&[1, 3, 16])).unwrap();
        let r = enc.layer(&mut g, &p, 1, h, Some(&[false, false, false]));
        assert!(matches!(r, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn encode_is_deterministic() {
        let tokens = TokenBatch::from_sequences(&[vec![1, 2, 3, 4]]).unwrap();
        let run = || {
            let (store, enc) = build(text_cfg(), "text", 11);
            let mut g = Graph::new();
            let p = store.bind(&mut g).unwrap();
            let x = enc.embed_tokens(&mut g, &p, &tokens).unwrap();
            let hs = enc.encode(&mut g, &p, x, Some(&tokens.valid)).unwrap();
            g.value(hs.last()).clone()
        };
        assert_eq!(run(), run());
    }
}
