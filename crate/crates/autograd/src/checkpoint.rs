//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "NAVCKPT\0"            8 bytes
//! version u32 (= 1)
//! dtype   u8  (0 = f32, 1 = f64)
//! n_meta  u32, then n_meta × (key: u32 len + utf8, value: u32 len + utf8)
//! n_tens  u32, then n_tens × (name: u32 len + utf8, ndim u32, dims u64 × ndim, raw values)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NAVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub metadata: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Default for Checkpoint<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new() -> Self {
        Self {
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor<F>)] {
        &self.tensors
    }

    /// Appends every parameter of `store` under its own name.
    pub fn add_params(&mut self, store: &ParamStore<F>) {
        for (_, p) in store.iter() {
            self.push(p.name.clone(), p.value.clone());
        }
    }

    /// Overwrites every parameter of `store` with the tensor of the same name.
    pub fn load_params(&self, store: &mut ParamStore<F>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_params",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(F::DTYPE);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != F::DTYPE {
            return Err(TensorError::Checkpoint(format!("dtype tag {dtype} does not match reader")));
        }
        let mut ckpt = Self::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ckpt.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * F::BYTES)?;
            let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
            ckpt.push(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Checkpoint("trailing bytes".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TensorError::Checkpoint("invalid utf8".into()))
    }
}
