//! Versioned binary container for network state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the raw little-endian tensor payload in header order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"NRGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// What the container holds, e.g. `generator_bundle` or `denoiser`.
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>, TensorData)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint { kind: kind.to_string(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: TensorData) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match its shape");
        self.tensors.push((name.into(), shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &TensorData)> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| (t.1.as_slice(), &t.2))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.0.as_str())
    }

    /// Store every parameter of `params` under `prefix/`.
    pub fn put_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for (name, t) in params.names().iter().zip(params.tensors()) {
            self.push(format!("{prefix}/{name}"), t.shape(), TensorData::F32(t.to_vec()));
        }
    }

    /// Overwrite `params` from `prefix/`, requiring the exact same names and shapes.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        for i in 0..params.len() {
            let name = format!("{prefix}/{}", params.names()[i]);
            let (shape, data) = self.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if shape != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    params.get(i).shape()
                )));
            }
            let TensorData::F32(v) = data else {
                return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
            };
            params.set(i, v.clone());
        }
        let extra = self.names().filter(|n| n.starts_with(&format!("{prefix}/"))).count();
        if extra != params.len() {
            return Err(Error::Checkpoint(format!("{prefix}: {extra} stored tensors, network has {}", params.len())));
        }
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &Adam) {
        for (i, (a, b)) in adam.m.iter().zip(&adam.v).enumerate() {
            self.push(format!("{prefix}/m{i}"), &[a.len()], TensorData::F64(a.clone()));
            self.push(format!("{prefix}/v{i}"), &[b.len()], TensorData::F64(b.clone()));
        }
        self.push(format!("{prefix}/step"), &[1], TensorData::F64(vec![adam.step as f64]));
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut Adam) -> Result<()> {
        let fetch = |name: String, len: usize| -> Result<Vec<f64>> {
            match self.get(&name) {
                Some((_, TensorData::F64(v))) if v.len() == len => Ok(v.clone()),
                _ => Err(Error::Checkpoint(format!("optimizer tensor {name} missing or malformed"))),
            }
        };
        let lens: Vec<usize> = adam.m.iter().map(Vec::len).collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, &len) in lens.iter().enumerate() {
            m.push(fetch(format!("{prefix}/m{i}"), len)?);
            v.push(fetch(format!("{prefix}/v{i}"), len)?);
        }
        adam.step = fetch(format!("{prefix}/step"), 1)?[0] as u64;
        adam.m = m;
        adam.v = v;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, s, d)| Entry {
                    name: n.clone(),
                    shape: s.clone(),
                    dtype: match d {
                        TensorData::F32(_) => "f32".into(),
                        TensorData::F64(_) => "f64".into(),
                    },
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + h.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, _, d) in &self.tensors {
            match d {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f32" => {
                    let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated payload"))?;
                    pos += 4 * n;
                    TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
                }
                "f64" => {
                    let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated payload"))?;
                    pos += 8 * n;
                    TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
            };
            tensors.push((e.name, e.shape, data));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Error unless the container is of `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("checkpoint holds {:?}, expected {kind:?}", self.kind)));
        }
        Ok(())
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}
