//! Named parameter tensors, gradient buffers and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PLAYCKPT"
//! version    u32      1
//! updates    u64      optimizer steps applied to this store
//! count      u32      number of tensors
//! manifest   count × { name_len u32, name utf-8, ndim u32, dims u64×ndim, offset u64 }
//! data       f64 little-endian, tensor i starting at float index offset_i
//! ```
//!
//! Student, teacher and optimizer-moment files all share this layout.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLAYCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter value does not match its shape");
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered parameter collection. Order is fixed at construction, which is
/// what pairs student and teacher tensors for the EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    updates: u64,
}

impl ParamStore {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params, updates: 0 }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.params[i].value
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub(crate) fn bump_updates(&mut self) {
        self.updates += 1;
    }


    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Name and shape of every tensor, in order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
    }

    pub fn same_manifest(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|&g| g == 0.0))
    }

    /// Adds `scale · grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    /// Scalar view `(tensor, element)` over all parameters.
    pub fn flat_index(&self, mut i: usize) -> (usize, usize) {
        for (t, p) in self.params.iter().enumerate() {
            if i < p.len() {
                return (t, i);
            }
            i -= p.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.updates.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += p.len() as u64;
        }
        for p in &self.params {
            for v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let updates = cur.u64().ok_or_else(|| bad("truncated header"))?;
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32().ok_or_else(|| bad("truncated manifest"))? as usize;
            let name = std::str::from_utf8(cur.take(name_len).ok_or_else(|| bad("truncated manifest"))?)
                .map_err(|_| bad("non-utf8 tensor name"))?
                .to_string();
            let ndim = cur.u32().ok_or_else(|| bad("truncated manifest"))? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated manifest"))?;
            let offset = cur.u64().ok_or_else(|| bad("truncated manifest"))? as usize;
            entries.push((name, shape, offset));
        }
        let data = &bytes[cur.pos..];
        let mut params = Vec::with_capacity(count);
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let start = offset * 8;
            let end = start + n * 8;
            if end > data.len() {
                return Err(bad(&format!("tensor {name} runs past end of file")));
            }
            let value = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Param::new(name, shape, value));
        }
        Ok(Self { params, updates })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Gradient buffers shaped like a [`ParamStore`]; one per sample so that
/// samples can be differentiated independently and summed in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn flat(&self, i: usize) -> f64 {
        let mut i = i;
        for t in &self.0 {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat gradient index out of range");
    }
}
