//! Staged freeze/unfreeze schedule and the training loop.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{batch_indices, make_batch, Dataset, PairedExample};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, retrieval_inference};
use crate::model::BridgeModel;
use crate::objectives::{LossKind, LossReport};
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    /// Encoders frozen; bridge, positions, heads, temperature and loss weights train.
    A,
    /// Stage A plus the top-K blocks of both encoders.
    B,
    /// Task tuning; retrieval needs none, so it trains the Stage B set when used.
    C,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::A => "A",
            StageId::B => "B",
            StageId::C => "C",
        })
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(StageId::A),
            "B" => Ok(StageId::B),
            "C" => Ok(StageId::C),
            other => Err(Error::Format(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub id: StageId,
    pub epochs: usize,
    pub lr: f64,
    /// Top encoder blocks unfrozen per tower (ignored in Stage A).
    pub k: usize,
}

/// Parameter groups the stage trains, restricted to groups the model has.
pub fn stage_groups<T: Real>(model: &BridgeModel<T>, stage: &StageSpec) -> Result<Vec<String>> {
    let existing = model.store.groups();
    let mut wanted: Vec<String> = existing
        .iter()
        .filter(|g| {
            g.starts_with("bridge.")
                || g.ends_with(".pos")
                || g.starts_with("heads.")
                || *g == "tau"
                || *g == "loss_weights"
        })
        .cloned()
        .collect();
    if stage.id != StageId::A {
        let l = model.num_layers();
        if stage.k == 0 || stage.k > l {
            return Err(Error::config(format!("stage {} unfreezes K={} of {l} blocks", stage.id, stage.k)));
        }
        for layer in l - stage.k + 1..=l {
            for tower in ["text", "vision"] {
                wanted.push(format!("{tower}.layer{layer}"));
            }
        }
    }
    Ok(wanted)
}

/// Per group: parameter tensors, scalar count, trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableReport {
    pub groups: Vec<(String, usize, usize, bool)>,
}

impl TrainableReport {
    pub fn trainable_values(&self) -> usize {
        self.groups.iter().filter(|g| g.3).map(|g| g.2).sum()
    }
}

/// Freezes everything outside the stage's groups.
pub fn set_trainable<T: Real>(model: &mut BridgeModel<T>, stage: &StageSpec) -> Result<TrainableReport> {
    let groups = stage_groups(model, stage)?;
    model.store.set_trainable_groups(&groups)?;
    let mut report = TrainableReport { groups: Vec::new() };
    for name in model.store.groups() {
        let members: Vec<_> = model.store.iter().filter(|p| p.group == name).collect();
        let values = members.iter().map(|p| p.value.numel()).sum();
        report.groups.push((name.clone(), members.len(), values, members[0].trainable));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stages: Vec<StageSpec>,
    pub adam: AdamConfig,
    /// Evaluate retrieval on the validation split after each epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            stages: vec![
                StageSpec { id: StageId::A, epochs: 5, lr: 1e-3, k: 2 },
                StageSpec { id: StageId::B, epochs: 10, lr: 3e-4, k: 2 },
            ],
            adam: AdamConfig::default(),
            eval_every_epoch: true,
        }
    }
}

/// Independent streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub dropout: u64,
    pub batch: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Seeds {
    pub fn from_master(seed: u64) -> Self {
        let d = |k: u64| splitmix64(seed ^ splitmix64(k));
        Seeds { data: d(1), init: d(2), dropout: d(3), batch: d(4) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: StageId,
    pub epoch: usize,
    /// Global step, counted from 1.
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn to_log_line(&self) -> String {
        format!(
            "stage={} step={} epoch={} {} lr={:e} grad_norm={:.6}",
            self.stage,
            self.step,
            self.epoch,
            self.report.to_kv(),
            self.lr,
            self.grad_norm
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: StageId,
    pub epoch: usize,
    /// Mean raw value per enabled component.
    pub components: Vec<(LossKind, f64)>,
    pub mean_total: f64,
    /// Validation (TR@1, IR@1) from the retrieval path.
    pub val_recall: Option<(f64, f64)>,
}

impl EpochRecord {
    pub fn to_log_line(&self) -> String {
        let mut s = format!("stage={} epoch_end={}", self.stage, self.epoch);
        for (k, v) in &self.components {
            s.push_str(&format!(" mean_{k}={v:.6}"));
        }
        s.push_str(&format!(" mean_total={:.6}", self.mean_total));
        if let Some((tr, ir)) = self.val_recall {
            s.push_str(&format!(" val_tr1={tr:.4} val_ir1={ir:.4}"));
        }
        s
    }
}

pub enum Event<'a, T> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    StageEnd { stage: StageId, step: u64, model: &'a BridgeModel<T> },
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// (stage, first step, last step) in execution order.
    pub stage_trace: Vec<(StageId, u64, u64)>,
}

/// Gradients of the loss on one batch, aligned with the store (`None` for frozen parameters).
pub fn batch_gradients<T: Real>(
    model: &BridgeModel<T>,
    batch: &crate::model::PairBatch<T>,
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<(Vec<Option<Tensor<T>>>, LossReport)> {
    let mut g = match dropout_rng {
        Some(rng) if model.config.bridge.dropout > 0.0 => Graph::with_dropout(rng),
        _ => Graph::new(),
    };
    let p = model.store.bind(&mut g)?;
    let out = model.loss(&mut g, &p, batch)?;
    let grads = g.backward(out.total)?;
    let aligned = model
        .store
        .iter()
        .zip(p.vars())
        .map(|(prm, &v)| if prm.trainable { grads.get(v) } else { None })
        .collect();
    Ok((aligned, out.report))
}

/// Runs the configured stages in order. `on_event` sees every step, epoch end and stage end.
pub fn train<T: Real>(
    model: &mut BridgeModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seeds: Seeds,
    on_event: &mut dyn FnMut(Event<'_, T>) -> Result<()>,
) -> Result<TrainHistory> {
    let train_split = &data.train;
    if cfg.batch_size < 2 || cfg.batch_size > train_split.len() {
        return Err(Error::config(format!(
            "batch size {} must be in 2..={}",
            cfg.batch_size,
            train_split.len()
        )));
    }
    for pair in cfg.stages.windows(2) {
        if pair[0].id >= pair[1].id {
            return Err(Error::config("stages must run in A, B, C order"));
        }
    }
    let mut history = TrainHistory::default();
    let mut step = 0u64;
    let mut epoch_counter = 0u64;
    for stage in &cfg.stages {
        set_trainable(model, stage)?;
        let mut opt = AdamW::new(&model.store, cfg.adam);
        let first = step + 1;
        for epoch in 0..stage.epochs {
            let order = batch_indices(train_split.len(), cfg.batch_size, seeds.batch, epoch_counter)?;
            epoch_counter += 1;
            let mut sums = vec![0.0; LossKind::ALL.len()];
            let mut seen = [false; 4];
            let mut total = 0.0;
            for idx in &order {
                step += 1;
                let refs: Vec<&PairedExample> = idx.iter().map(|&i| &train_split[i]).collect();
                let batch = make_batch::<T>(&data.spec, &refs)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
                rng.set_stream(step);
                let (grads, report) = batch_gradients(model, &batch, Some(rng))?;
                let info = opt.step(&mut model.store, &grads, stage.lr)?;
                model.clamp_tau();
                for &(k, v, _) in &report.components {
                    sums[k.index()] += v;
                    seen[k.index()] = true;
                }
                total += report.total;
                let rec = StepRecord { stage: stage.id, epoch, step, report, lr: stage.lr, grad_norm: info.grad_norm };
                on_event(Event::Step(&rec))?;
                history.steps.push(rec);
            }
            let n = order.len() as f64;
            let val_recall = if cfg.eval_every_epoch && !data.val.is_empty() {
                let emb = retrieval_inference(model, &data.spec, &data.val)?;
                let (tr, ir) = recall_at_k(&emb.text, &emb.vision, &[1])?;
                Some((tr[0], ir[0]))
            } else {
                None
            };
            let rec = EpochRecord {
                stage: stage.id,
                epoch,
                components: LossKind::ALL.into_iter().filter(|k| seen[k.index()]).map(|k| (k, sums[k.index()] / n)).collect(),
                mean_total: total / n,
                val_recall,
            };
            on_event(Event::Epoch(&rec))?;
            history.epochs.push(rec);
        }
        history.stage_trace.push((stage.id, first, step));
        on_event(Event::StageEnd { stage: stage.id, step, model })?;
    }
    Ok(history)
}
