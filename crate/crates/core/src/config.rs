//! Flat `dotted.key = value` run configuration with defaults, file and flag layers.

use std::path::PathBuf;
use std::str::FromStr;

use crate::bridge::{FusionVariant, Placement};
use crate::data::ConceptSpec;
use crate::encoders::EncoderInput;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossKind;
use crate::training::{StageId, StageSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: ConceptSpec,
    /// Total examples across all splits.
    pub data_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = ConceptSpec::default();
        let mut model = ModelConfig::default();
        model.text.input = EncoderInput::Tokens { vocab_size: data.vocab_size };
        model.vision.input = EncoderInput::Patches { patch_dim: data.patch_dim };
        RunConfig { seed: 0, out: PathBuf::from("runs/default"), data, data_size: 640, model, train: TrainConfig::default() }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data.size",
    "data.num_concepts",
    "data.grid_side",
    "data.patch_dim",
    "data.vocab_size",
    "data.caption_min",
    "data.caption_max",
    "data.noise_sigma",
    "data.max_concepts",
    "data.function_word_frac",
    "text.layers",
    "text.width",
    "text.heads",
    "text.ffn_mult",
    "text.max_positions",
    "vision.layers",
    "vision.width",
    "vision.heads",
    "vision.ffn_mult",
    "vision.max_positions",
    "bridge.q",
    "bridge.placement",
    "bridge.d_s",
    "bridge.h_s",
    "bridge.fusion",
    "bridge.gate_init",
    "bridge.dropout",
    "model.embed_dim",
    "loss.enabled",
    "loss.mode",
    "loss.weight.itc_uni",
    "loss.weight.itc_cross",
    "loss.weight.itm",
    "loss.weight.cyc",
    "loss.tau_init",
    "loss.mlm",
    "loss.mim",
    "train.batch_size",
    "train.eval_every_epoch",
    "stages.A.epochs",
    "stages.A.lr",
    "stages.B.epochs",
    "stages.B.lr",
    "stages.B.k",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.weight_decay",
    "optim.clip_norm",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

/// Parses config text into `(key, value)` pairs. Unknown keys are rejected.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn stage_mut(cfg: &mut RunConfig, id: StageId) -> &mut StageSpec {
    cfg.train.stages.iter_mut().find(|s| s.id == id).expect("stages A and B are always configured")
}

impl RunConfig {
    /// Sets one key. Values are checked for syntax here and for consistency in [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.size" => self.data_size = parse(key, v)?,
            "data.num_concepts" => d.num_concepts = parse(key, v)?,
            "data.grid_side" => d.grid_side = parse(key, v)?,
            "data.patch_dim" => {
                d.patch_dim = parse(key, v)?;
                m.vision.input = EncoderInput::Patches { patch_dim: d.patch_dim };
            }
            "data.vocab_size" => {
                d.vocab_size = parse(key, v)?;
                m.text.input = EncoderInput::Tokens { vocab_size: d.vocab_size };
            }
            "data.caption_min" => d.caption_min = parse(key, v)?,
            "data.caption_max" => d.caption_max = parse(key, v)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, v)?,
            "data.max_concepts" => d.max_concepts = parse(key, v)?,
            "data.function_word_frac" => d.function_word_frac = parse(key, v)?,
            "text.layers" => m.text.layers = parse(key, v)?,
            "text.width" => m.text.width = parse(key, v)?,
            "text.heads" => m.text.heads = parse(key, v)?,
            "text.ffn_mult" => m.text.ffn_mult = parse(key, v)?,
            "text.max_positions" => m.text.max_positions = parse(key, v)?,
            "vision.layers" => m.vision.layers = parse(key, v)?,
            "vision.width" => m.vision.width = parse(key, v)?,
            "vision.heads" => m.vision.heads = parse(key, v)?,
            "vision.ffn_mult" => m.vision.ffn_mult = parse(key, v)?,
            "vision.max_positions" => m.vision.max_positions = parse(key, v)?,
            "bridge.q" => m.bridge.q = parse(key, v)?,
            "bridge.placement" => m.bridge.placement = v.parse()?,
            "bridge.d_s" => m.bridge.d_s = parse(key, v)?,
            "bridge.h_s" => m.bridge.h_s = parse(key, v)?,
            "bridge.fusion" => m.bridge.fusion = v.parse()?,
            "bridge.gate_init" => m.bridge.gate_init = parse(key, v)?,
            "bridge.dropout" => m.bridge.dropout = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "loss.enabled" => {
                let mut on = [false; 4];
                for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    on[name.parse::<LossKind>()?.index()] = true;
                }
                m.losses = on;
            }
            "loss.mode" => m.weight_mode = v.parse()?,
            "loss.weight.itc_uni" => m.loss_lambdas[0] = parse(key, v)?,
            "loss.weight.itc_cross" => m.loss_lambdas[1] = parse(key, v)?,
            "loss.weight.itm" => m.loss_lambdas[2] = parse(key, v)?,
            "loss.weight.cyc" => m.loss_lambdas[3] = parse(key, v)?,
            "loss.tau_init" => m.tau_init = parse(key, v)?,
            "loss.mlm" | "loss.mim" => {
                if v != "off" {
                    return Err(Error::config(format!("`{key}` only accepts `off`")));
                }
            }
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.eval_every_epoch" => self.train.eval_every_epoch = parse_bool(key, v)?,
            "stages.A.epochs" => stage_mut(self, StageId::A).epochs = parse(key, v)?,
            "stages.A.lr" => stage_mut(self, StageId::A).lr = parse(key, v)?,
            "stages.B.epochs" => stage_mut(self, StageId::B).epochs = parse(key, v)?,
            "stages.B.lr" => stage_mut(self, StageId::B).lr = parse(key, v)?,
            "stages.B.k" => {
                let k = parse(key, v)?;
                stage_mut(self, StageId::A).k = k;
                stage_mut(self, StageId::B).k = k;
            }
            "optim.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "optim.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "optim.eps" => self.train.adam.eps = parse(key, v)?,
            "optim.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "optim.clip_norm" => {
                self.train.adam.clip_norm = match v {
                    "off" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of a key, formatted so that [`RunConfig::set`] reads it back unchanged.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let d = &self.data;
        let stage = |id| self.train.stages.iter().find(|s: &&StageSpec| s.id == id).expect("configured stage");
        Ok(match key {
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            "data.size" => self.data_size.to_string(),
            "data.num_concepts" => d.num_concepts.to_string(),
            "data.grid_side" => d.grid_side.to_string(),
            "data.patch_dim" => d.patch_dim.to_string(),
            "data.vocab_size" => d.vocab_size.to_string(),
            "data.caption_min" => d.caption_min.to_string(),
            "data.caption_max" => d.caption_max.to_string(),
            "data.noise_sigma" => d.noise_sigma.to_string(),
            "data.max_concepts" => d.max_concepts.to_string(),
            "data.function_word_frac" => d.function_word_frac.to_string(),
            "text.layers" => m.text.layers.to_string(),
            "text.width" => m.text.width.to_string(),
            "text.heads" => m.text.heads.to_string(),
            "text.ffn_mult" => m.text.ffn_mult.to_string(),
            "text.max_positions" => m.text.max_positions.to_string(),
            "vision.layers" => m.vision.layers.to_string(),
            "vision.width" => m.vision.width.to_string(),
            "vision.heads" => m.vision.heads.to_string(),
            "vision.ffn_mult" => m.vision.ffn_mult.to_string(),
            "vision.max_positions" => m.vision.max_positions.to_string(),
            "bridge.q" => m.bridge.q.to_string(),
            "bridge.placement" => m.bridge.placement.to_string(),
            "bridge.d_s" => m.bridge.d_s.to_string(),
            "bridge.h_s" => m.bridge.h_s.to_string(),
            "bridge.fusion" => m.bridge.fusion.to_string(),
            "bridge.gate_init" => m.bridge.gate_init.to_string(),
            "bridge.dropout" => m.bridge.dropout.to_string(),
            "model.embed_dim" => m.embed_dim.to_string(),
            "loss.enabled" => m.enabled_losses().iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
            "loss.mode" => m.weight_mode.to_string(),
            "loss.weight.itc_uni" => m.loss_lambdas[0].to_string(),
            "loss.weight.itc_cross" => m.loss_lambdas[1].to_string(),
            "loss.weight.itm" => m.loss_lambdas[2].to_string(),
            "loss.weight.cyc" => m.loss_lambdas[3].to_string(),
            "loss.tau_init" => m.tau_init.to_string(),
            "loss.mlm" | "loss.mim" => "off".to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.eval_every_epoch" => self.train.eval_every_epoch.to_string(),
            "stages.A.epochs" => stage(StageId::A).epochs.to_string(),
            "stages.A.lr" => stage(StageId::A).lr.to_string(),
            "stages.B.epochs" => stage(StageId::B).epochs.to_string(),
            "stages.B.lr" => stage(StageId::B).lr.to_string(),
            "stages.B.k" => stage(StageId::B).k.to_string(),
            "optim.beta1" => self.train.adam.beta1.to_string(),
            "optim.beta2" => self.train.adam.beta2.to_string(),
            "optim.eps" => self.train.adam.eps.to_string(),
            "optim.weight_decay" => self.train.adam.weight_decay.to_string(),
            "optim.clip_norm" => self.train.adam.clip_norm.map_or("off".to_string(), |c| c.to_string()),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        })
    }

    /// Defaults, then `file_text`, then `overrides`; later layers win.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            for (k, v) in parse_text(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RunConfig::resolve(Some(text), &[])
    }

    /// The snapshot text with run-location keys removed; two runs with equal
    /// signatures build identical models and data.
    pub fn signature(&self) -> String {
        self.to_text().lines().filter(|l| !l.starts_with("out ")).map(|l| format!("{l}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.vision.max_positions < self.data.patches_per_image() {
            return Err(Error::config("vision.max_positions is smaller than the patch count"));
        }
        if self.model.text.max_positions < self.data.caption_max {
            return Err(Error::config("text.max_positions is smaller than data.caption_max"));
        }
        let b = self.train.batch_size;
        if b < 2 || self.data_size < 3 * b {
            return Err(Error::config(format!("batch size {b} needs 2 ≤ B and data.size ≥ 3·B")));
        }
        for s in &self.train.stages {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::config(format!("stage {} learning rate must be positive", s.id)));
            }
        }
        let l = self.model.text.layers;
        let k = self.train.stages.iter().find(|s| s.id == StageId::B).map_or(1, |s| s.k);
        if k == 0 || k > l {
            return Err(Error::config(format!("stages.B.k must be in 1..={l}")));
        }
        let a = &self.train.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::config("invalid optimizer settings"));
        }
        if !(0.0..1.0).contains(&self.model.bridge.dropout) {
            return Err(Error::config("bridge.dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Values of one ablation axis, and the overrides each value applies.
pub fn axis_values(axis: &str, values: Option<&[String]>) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let pick = |defaults: &[&str]| -> Vec<String> {
        values.map_or_else(|| defaults.iter().map(|s| s.to_string()).collect(), <[String]>::to_vec)
    };
    let one = |key: &str, v: &str| vec![(key.to_string(), v.to_string())];
    match axis {
        "fusion" => pick(&["none", "pooled_only", "self_plus_cross", "cross_only"])
            .into_iter()
            .map(|v| {
                v.parse::<FusionVariant>()?;
                Ok((v.clone(), one("bridge.fusion", &v)))
            })
            .collect(),
        "placement" => pick(&["early", "middle", "late", "staggered"])
            .into_iter()
            .map(|v| {
                v.parse::<Placement>()?;
                Ok((v.clone(), one("bridge.placement", &v)))
            })
            .collect(),
        "Q" | "q" => pick(&["2", "4", "6"])
            .into_iter()
            .map(|v| {
                parse::<usize>("bridge.q", &v)?;
                Ok((v.clone(), one("bridge.q", &v)))
            })
            .collect(),
        "losses" => pick(&["infonce", "infonce_itm", "infonce_cyc", "full"])
            .into_iter()
            .map(|v| {
                let set = match v.as_str() {
                    "infonce" => "itc_uni,itc_cross",
                    "infonce_itm" => "itc_uni,itc_cross,itm",
                    "infonce_cyc" => "itc_uni,itc_cross,cyc",
                    "full" => "itc_uni,itc_cross,itm,cyc",
                    other => return Err(Error::config(format!("unknown loss variant `{other}`"))),
                };
                Ok((v.clone(), one("loss.enabled", set)))
            })
            .collect(),
        other => Err(Error::config(format!("unknown ablation axis `{other}`"))),
    }
}
