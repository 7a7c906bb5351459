//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "BITCNCK\0"
//! version    u32
//! header     u32 length + UTF-8 TOML (hyperparameters, input dims,
//!            epoch, rng and optimizer scalars)
//! count      u32
//! tensor*    u32 name length, name, u32 rank, u64 dims[rank],
//!            f64 values[product(dims)]
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiTCNModel, HyperParams, InputDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"BITCNCK\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BiTCNModel,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    hyper: HyperParams,
    inputs: InputDims,
    rng: Option<RngHeader>,
    optimizer: Option<OptimizerHeader>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            hyper: self.model.hyper.clone(),
            inputs: self.model.inputs.clone(),
            rng: self.rng.map(|r| RngHeader {
                seed: hex(&r.seed),
                stream: r.stream.to_string(),
                word_pos: r.word_pos.to_string(),
            }),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;

        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (i, (name, _)) in self.model.params.iter().enumerate() {
                tensors.push((format!("adam.m/{name}"), &opt.m[i]));
                tensors.push((format!("adam.v/{name}"), &opt.v[i]));
            }
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            write_tensor(&mut buf, name, t);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint file (bad magic or truncated)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(fail("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().ok_or_else(|| fail("truncated version".into()))?;
        if version != FORMAT_VERSION {
            return Err(fail(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let hlen = r.u32().ok_or_else(|| fail("truncated header".into()))? as usize;
        let text = r
            .take(hlen)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| fail("unreadable header".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| fail(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(format!("header format version {}", header.format_version)));
        }

        let mut named = std::collections::HashMap::new();
        let count = r.u32().ok_or_else(|| fail("truncated tensor count".into()))?;
        for _ in 0..count {
            let (name, t) = r.tensor().ok_or_else(|| fail("truncated tensor".into()))?;
            named.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after tensors".into()));
        }

        let mut dummy = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = BiTCNModel::new(header.hyper, header.inputs, &mut dummy)
            .map_err(|e| fail(format!("hyperparameters: {e}")))?;
        let ids: Vec<_> = model.params.ids().collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = named
                .remove(name)
                .ok_or_else(|| fail(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(fail(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for &id in &ids {
            let name = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = take(&name, &shape)?.with_grad();
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for &id in &ids {
                    let name = model.params.name(id).to_string();
                    let shape = model.params.get(id).shape().to_vec();
                    m.push(take(&format!("adam.m/{name}"), &shape)?);
                    v.push(take(&format!("adam.v/{name}"), &shape)?);
                }
                Some(AdamState {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if let Some(extra) = named.keys().next() {
            return Err(fail(format!("unexpected tensor {extra}")));
        }
        let rng = match header.rng {
            Some(h) => Some(RngState {
                seed: unhex(&h.seed).ok_or_else(|| fail("bad rng seed".into()))?,
                stream: h.stream.parse().map_err(|_| fail("bad rng stream".into()))?,
                word_pos: h.word_pos.parse().map_err(|_| fail("bad rng position".into()))?,
            }),
            None => None,
        };
        Ok(Checkpoint {
            model,
            optimizer,
            rng,
            epoch: header.epoch,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Tensor)> {
        let nlen = self.u32()? as usize;
        let name = String::from_utf8(self.take(nlen)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(n.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some((name, Tensor::new(dims, data).ok()?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Loads a checkpoint and rejects it unless its hyperparameters equal
/// `expected`, naming the first differing field.
pub fn load_checkpoint_expecting(path: &Path, expected: &HyperParams) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some(field) = hyper_mismatch(&ckpt.model.hyper, expected) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("hyperparameter mismatch in field `{field}`"),
        });
    }
    Ok(ckpt)
}

/// Name of the first field where the two configurations differ.
pub fn hyper_mismatch(a: &HyperParams, b: &HyperParams) -> Option<String> {
    let ta = toml::Value::try_from(a).ok()?;
    let tb = toml::Value::try_from(b).ok()?;
    let (ta, tb) = (ta.as_table()?, tb.as_table()?);
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .find(|k| ta.get(k.as_str()) != tb.get(k.as_str()))
        .cloned()
}
