//! Binary checkpoint: magic, little-endian `u32` version, then named blocks
//! until an `end` block. Each block is `u32` name length, UTF-8 name, `u8`
//! kind and a `u64` payload length. Tensor payloads carry their rank and
//! dims as `u64` followed by little-endian `f64` values.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::{FeatureStats, Normalizer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CRITART\0";
pub const FORMAT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;
const KIND_U64: u8 = 2;
const KIND_END: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Effective configuration as `key = value` lines.
    pub config: String,
    pub phonemes: Vec<String>,
    pub epochs_done: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub normalizer: Normalizer,
    /// Metrics CSV accumulated so far.
    pub metrics: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn block(&mut self, name: &str, kind: u8, payload: &[u8]) {
        self.0.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.0.extend_from_slice(name.as_bytes());
        self.0.push(kind);
        self.0
            .extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.0.extend_from_slice(payload);
    }

    fn text(&mut self, name: &str, s: &str) {
        self.block(name, KIND_TEXT, s.as_bytes());
    }

    fn u64(&mut self, name: &str, v: u64) {
        self.block(name, KIND_U64, &v.to_le_bytes());
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        let mut p = Vec::with_capacity(8 * (1 + t.rank() + t.numel()));
        p.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            p.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            p.extend_from_slice(&v.to_le_bytes());
        }
        self.block(name, KIND_TENSOR, &p);
    }

    fn vector(&mut self, name: &str, v: &[f64]) {
        self.tensor(name, &Tensor::vector(v.to_vec()));
    }
}

enum Value {
    Tensor(Tensor),
    Text(String),
    U64(u64),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<(String, u8, &'a [u8])> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let kind = self.take(1)?[0];
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("block too large".into()))?;
        Ok((name, kind, self.take(len)?))
    }
}

fn decode(name: &str, kind: u8, payload: &[u8]) -> Result<Value> {
    let bad = |why: &str| Error::Checkpoint(format!("block `{name}`: {why}"));
    match kind {
        KIND_TEXT => Ok(Value::Text(
            String::from_utf8(payload.to_vec()).map_err(|_| bad("text is not UTF-8"))?,
        )),
        KIND_U64 => Ok(Value::U64(u64::from_le_bytes(
            payload
                .try_into()
                .map_err(|_| bad("integer must be 8 bytes"))?,
        ))),
        KIND_TENSOR => {
            let mut r = Reader {
                buf: payload,
                pos: 0,
            };
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(bad("rank too large"));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("shape overflows"))?;
            if payload.len() - r.pos != numel * 8 {
                return Err(bad("payload size does not match shape"));
            }
            let data = payload[r.pos..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Value::Tensor(Tensor::new(shape, data)?))
        }
        k => Err(bad(&format!("unknown kind {k}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.text("config", &self.config);
        w.text("phonemes", &self.phonemes.join("\n"));
        w.u64("epochs_done", self.epochs_done);
        w.u64("adam.step", self.adam_step);
        for (i, (name, t)) in self.params.iter().enumerate() {
            w.tensor(&format!("param/{name}"), t);
            w.tensor(&format!("adam.m/{name}"), &self.adam_m[i]);
            w.tensor(&format!("adam.v/{name}"), &self.adam_v[i]);
        }
        let n = &self.normalizer;
        w.vector("norm/mfcc.mean", &n.mfcc.mean);
        w.vector("norm/mfcc.std", &n.mfcc.std);
        w.vector("norm/ema.mean", &n.ema.mean);
        w.vector("norm/ema.std", &n.ema.std);
        w.text("metrics", &self.metrics);
        w.block("end", KIND_END, &[]);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut text = std::collections::HashMap::new();
        let mut ints = std::collections::HashMap::new();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        loop {
            let (name, kind, payload) = r.block()?;
            if kind == KIND_END {
                break;
            }
            match decode(&name, kind, payload)? {
                Value::Text(s) => {
                    text.insert(name, s);
                }
                Value::U64(v) => {
                    ints.insert(name, v);
                }
                Value::Tensor(t) => tensors.push((name, t)),
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after end block".into()));
        }
        let mut text_field = |k: &str| {
            text.remove(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{k}`")))
        };
        let config = text_field("config")?;
        let phonemes = text_field("phonemes")?;
        let metrics = text_field("metrics")?;
        let int = |k: &str| {
            ints.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{k}`")))
        };

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut norm = std::collections::HashMap::new();
        let mut pending: std::collections::HashMap<String, Tensor> =
            std::collections::HashMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param/") {
                params.push((p.to_string(), t));
            } else if let Some(k) = name.strip_prefix("norm/") {
                norm.insert(k.to_string(), t.into_data());
            } else if name.starts_with("adam.m/") || name.starts_with("adam.v/") {
                pending.insert(name, t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected block `{name}`")));
            }
        }
        for (p, t) in &params {
            for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                let key = format!("{prefix}{p}");
                let mt = pending
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing block `{key}`")))?;
                if mt.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "block `{key}` has the wrong shape"
                    )));
                }
                dst.push(mt);
            }
        }
        if let Some(k) = pending.keys().next() {
            return Err(Error::Checkpoint(format!(
                "moment block `{k}` has no parameter"
            )));
        }
        let mut stats = |k: &str| -> Result<FeatureStats> {
            let mut get = |s: &str| {
                norm.remove(&format!("{k}.{s}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing block `norm/{k}.{s}`")))
            };
            Ok(FeatureStats {
                mean: get("mean")?,
                std: get("std")?,
            })
        };
        let normalizer = Normalizer {
            mfcc: stats("mfcc")?,
            ema: stats("ema")?,
        };
        Ok(Checkpoint {
            config,
            phonemes: phonemes.lines().map(str::to_string).collect(),
            epochs_done: int("epochs_done")?,
            params,
            adam_step: int("adam.step")?,
            adam_m: m,
            adam_v: v,
            normalizer,
            metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}
