//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "FFVT"  u32 version=1
//! u32 blob length, UTF-8 blob of sorted `key=value` lines
//! u32 tensor count, then per tensor:
//!     u16 name length, name bytes, u8 rank, u32 dims[rank], f32 values row-major
//! optimizer moments in the same framing (names `m.<param>` then `v.<param>`)
//! u64 step
//! u64 x4 RNG state
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ParameterSet};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"FFVT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub rng_state: [u64; 4],
    /// Completed epochs.
    pub epoch: u64,
    pub best_top1: f64,
}

impl Checkpoint {
    fn blob(&self) -> String {
        let mut lines: Vec<(String, String)> = Vec::new();
        for (k, v) in self.model.to_pairs() {
            lines.push((format!("model.{k}"), v));
        }
        for (k, v) in self.train.to_pairs() {
            lines.push((format!("train.{k}"), v));
        }
        lines.push(("state.best_top1".into(), self.best_top1.to_string()));
        lines.push(("state.epoch".into(), self.epoch.to_string()));
        lines.sort();
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blob = self.blob();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        write_tensors(&mut out, self.params.iter())?;
        let moments = self
            .optimizer
            .first
            .iter()
            .map(|(k, t)| (format!("m.{k}"), t))
            .chain(
                self.optimizer
                    .second
                    .iter()
                    .map(|(k, t)| (format!("v.{k}"), t)),
            )
            .collect::<Vec<_>>();
        write_tensors(&mut out, moments.iter().map(|(k, t)| (k.as_str(), *t)))?;
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for w in self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if bytes.len() < 8 {
            return Err(Error::Corruption(format!(
                "file is only {} bytes",
                bytes.len()
            )));
        }
        if r.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "missing FFVT magic".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let blob_len = r.u32()? as usize;
        let blob = std::str::from_utf8(r.take(blob_len)?)
            .map_err(|_| Error::Corruption("config blob is not UTF-8".into()))?;
        let (model, train, epoch, best_top1) = parse_blob(blob)?;

        let params_raw = read_tensors(&mut r)?;
        let specs = param_specs(&model);
        if params_raw.len() != specs.len() {
            return Err(Error::Corruption(format!(
                "config needs {} tensors, file has {}",
                specs.len(),
                params_raw.len()
            )));
        }
        let mut params = ParameterSet::new();
        for (spec, (name, t)) in specs.iter().zip(params_raw) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Corruption(format!(
                    "tensor {name} {:?} does not match config ({} {:?})",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.insert(name, t)?;
        }

        let moments = read_tensors(&mut r)?;
        if moments.len() != 2 * params.len() {
            return Err(Error::Corruption(format!(
                "expected {} optimizer tensors, found {}",
                2 * params.len(),
                moments.len()
            )));
        }
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        let n = params.len();
        for (i, (name, t)) in moments.into_iter().enumerate() {
            let (prefix, target) = if i < n {
                ("m.", &mut first)
            } else {
                ("v.", &mut second)
            };
            let (pname, p) = params.iter().nth(i % n).expect("index below len");
            if name.strip_prefix(prefix) != Some(pname) || t.shape() != p.shape() {
                return Err(Error::Corruption(format!(
                    "optimizer tensor {name} does not mirror parameter {pname}"
                )));
            }
            target.insert(pname.to_string(), t);
        }
        let step = r.u64()?;
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64()?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after RNG state",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            train,
            params,
            optimizer: OptimizerState {
                first,
                second,
                step,
            },
            rng_state,
            epoch,
            best_top1,
        })
    }
}

fn write_tensors<'a>(
    out: &mut Vec<u8>,
    tensors: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corruption(format!("truncated: need {n} bytes at offset {}", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

fn read_tensors(r: &mut Cursor<'_>) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("tensor {name} has an overflowing shape")))?;
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Corruption("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Corruption(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn parse_blob(blob: &str) -> Result<(ModelConfig, TrainConfig, u64, f64)> {
    let mut model = crate::model::Preset::Reduced.config();
    let mut train = TrainConfig::default();
    let mut epoch = None;
    let mut best = None;
    let corrupt = |m: String| Error::Corruption(m);
    for line in blob.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("malformed config line {line:?}")))?;
        let known = if let Some(k) = key.strip_prefix("model.") {
            model.set(k, value).map_err(|e| corrupt(e.to_string()))?
        } else if let Some(k) = key.strip_prefix("train.") {
            train.set(k, value).map_err(|e| corrupt(e.to_string()))?
        } else if key == "state.epoch" {
            epoch = Some(
                value
                    .parse()
                    .map_err(|_| corrupt(format!("bad epoch {value:?}")))?,
            );
            true
        } else if key == "state.best_top1" {
            best = Some(
                value
                    .parse()
                    .map_err(|_| corrupt(format!("bad metric {value:?}")))?,
            );
            true
        } else {
            false
        };
        if !known {
            return Err(corrupt(format!("unknown config key {key:?}")));
        }
    }
    model.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok((
        model,
        train,
        epoch.ok_or_else(|| corrupt("missing state.epoch".into()))?,
        best.ok_or_else(|| corrupt("missing state.best_top1".into()))?,
    ))
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
