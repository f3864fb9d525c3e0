//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "GAUC"  version: u32  count: u32
//! per tensor:
//!   name_len: u16  name: utf-8
//!   rank: u8  extents: u32 × rank
//!   dtype: u8 (0 = f32, 1 = f64)  data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::gau::ParamSet;
use crate::tensor::{DType, Element, Tensor};

use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"GAUC";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk: shape, dtype and raw little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub dtype: DType,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.size_bytes());
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        Self {
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            bytes,
        }
    }

    /// Decodes into `T`, converting through `f64` if the stored dtype differs.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data: Vec<T> = match self.dtype {
            d if d == T::DTYPE => self.bytes.chunks_exact(size).map(T::read_le).collect(),
            DType::F32 => self.bytes.chunks_exact(size).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(size).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub entries: Vec<(String, StoredTensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Checkpoint(format!("tensor `{name}` has rank above 255")))?;
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Checkpoint(format!("extent {d} of `{name}` exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(t.dtype.tag());
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unknown dtype tag {tag}")))?;
            let bytes = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` size {shape:?} overflows")))?;
            let data = r.take(bytes, &format!("data of `{name}`"))?.to_vec();
            entries.push((name, StoredTensor { shape, dtype, bytes: data }));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    fn expect<T: Element>(&self, name: &str, like: &Tensor<T>) -> Result<Tensor<T>> {
        let stored = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if stored.shape != like.shape() {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                expected: like.shape().to_vec(),
                found: stored.shape.clone(),
            });
        }
        stored.to_tensor()
    }

    /// Training step recorded in the checkpoint.
    pub fn step(&self) -> Result<u64> {
        let t: Tensor<f64> = self
            .get("meta.step")
            .ok_or_else(|| Error::Checkpoint("missing tensor `meta.step`".into()))?
            .to_tensor()?;
        Ok(t.item() as u64)
    }
}

/// Parameters, optimizer moments and the step counter.
pub fn to_checkpoint<T: Element, P: ParamSet<T>>(params: &P, state: Option<&AdamState<T>>, step: u64) -> Checkpoint {
    let mut c = Checkpoint::default();
    let named = params.named();
    for (n, t) in &named {
        c.push(format!("params.{n}"), *t);
    }
    if let Some(s) = state {
        for ((n, _), m) in named.iter().zip(&s.m) {
            c.push(format!("adam.m.{n}"), m);
        }
        for ((n, _), v) in named.iter().zip(&s.v) {
            c.push(format!("adam.v.{n}"), v);
        }
        c.push("meta.adam_step", &Tensor::<f64>::scalar(s.step as f64));
    }
    c.push("meta.step", &Tensor::<f64>::scalar(step as f64));
    c
}

pub fn save_checkpoint<T: Element, P: ParamSet<T>>(
    path: &Path,
    params: &P,
    state: Option<&AdamState<T>>,
    step: u64,
) -> Result<()> {
    to_checkpoint(params, state, step).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Overwrites `params` (and `state`, if given) from the checkpoint after
/// checking every shape. Returns the stored step.
pub fn restore<T: Element, P: ParamSet<T>>(
    ckpt: &Checkpoint,
    params: &mut P,
    state: Option<&mut AdamState<T>>,
) -> Result<u64> {
    let mut loaded = Vec::new();
    for (n, t) in params.named() {
        loaded.push(ckpt.expect(&format!("params.{n}"), t)?);
    }
    if let Some(s) = state {
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (i, n) in names.iter().enumerate() {
            m.push(ckpt.expect(&format!("adam.m.{n}"), &s.m[i])?);
            v.push(ckpt.expect(&format!("adam.v.{n}"), &s.v[i])?);
        }
        let step: Tensor<f64> = ckpt
            .get("meta.adam_step")
            .ok_or_else(|| Error::Checkpoint("missing tensor `meta.adam_step`".into()))?
            .to_tensor()?;
        s.m = m;
        s.v = v;
        s.step = step.item() as u64;
    }
    for ((_, dst), src) in params.named_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    ckpt.step()
}
