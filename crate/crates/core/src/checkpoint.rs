//! `.brdg` binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `BRDG`, u32 version, u32 length + UTF-8 config text, u32 parameter count,
//! then per parameter: u32 name length, name, u32 rank, rank × u32 dims, f32 values;
//! u8 stage marker (0 init, 1 A, 2 B, 3 C), u64 step, u32 CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::BridgeModel;
use crate::tensor::{Real, Tensor};
use crate::training::StageId;

pub const MAGIC: &[u8; 4] = b"BRDG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<StoredParam>,
    /// `None` for an initialization checkpoint.
    pub stage: Option<StageId>,
    pub step: u64,
}

fn stage_byte(s: Option<StageId>) -> u8 {
    match s {
        None => 0,
        Some(StageId::A) => 1,
        Some(StageId::B) => 2,
        Some(StageId::C) => 3,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn from_model<T: Real>(cfg: &RunConfig, model: &BridgeModel<T>, stage: Option<StageId>, step: u64) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|&x| x.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint { config_text: cfg.to_text(), params, stage, step }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len())?;
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for p in &self.params {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len())?;
            for &d in &p.shape {
                put_u32(&mut out, d)?;
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.push(stage_byte(self.stage));
        out.extend_from_slice(&self.step.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing BRDG magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let n = r.u32()?;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut params: Vec<StoredParam> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            if params.iter().any(|p| p.name == name) {
                return Err(Error::Format(format!("duplicate parameter `{name}`")));
            }
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("shape of `{name}` overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.push(StoredParam { name, shape, values });
        }
        let stage = match r.take(1)?[0] {
            0 => None,
            1 => Some(StageId::A),
            2 => Some(StageId::B),
            3 => Some(StageId::C),
            b => return Err(Error::Format(format!("unknown stage marker {b}"))),
        };
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint { config_text, params, stage, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("brdg.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_text(&self.config_text)
    }

    /// Copies stored values into `model`, which must have been built from `cfg`.
    /// Refuses when `cfg` differs from the snapshot or any name or shape disagrees.
    pub fn load_into<T: Real>(&self, cfg: &RunConfig, model: &mut BridgeModel<T>) -> Result<()> {
        let snapshot = self.config()?;
        if snapshot.signature() != cfg.signature() {
            let diff: Vec<String> = snapshot
                .signature()
                .lines()
                .zip(cfg.signature().lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("checkpoint `{a}` vs loader `{b}`"))
                .collect();
            return Err(Error::config(format!("config mismatch: {}", diff.join("; "))));
        }
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for sp in &self.params {
            let id = model
                .store
                .id(&sp.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", sp.name)))?;
            let p = model.store.get(id);
            if p.value.shape() != sp.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter `{}`: checkpoint {:?}, model {:?}",
                    sp.name,
                    sp.shape,
                    p.value.shape()
                )));
            }
        }
        for sp in &self.params {
            let id = model.store.id(&sp.name).expect("checked above");
            let data = sp.values.iter().map(|&v| T::c(v as f64)).collect();
            model.store.get_mut(id).value = Tensor::new(sp.shape.clone(), data)?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the embedded config and loads the stored values.
    pub fn restore<T: Real>(&self) -> Result<(RunConfig, BridgeModel<T>)> {
        let cfg = self.config()?;
        let mut model = BridgeModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.load_into(&cfg, &mut model)?;
        Ok((cfg, model))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}
