//! `CKPTV01` named-tensor checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "CKPTV01"                     7 bytes
//! global_step                   u64
//! seed                          u64
//! skipped_updates               u64
//! meta_len, meta                u64, UTF-8 text
//! tensor_count                  u64
//! per tensor:
//!   name_len, name              u64, UTF-8
//!   rank, dims[rank]            u64, u64 each
//!   payload                     f32 × Π dims
//! ```
//!
//! A parameter `w` is stored as `w`, with its Adam moments as `w@adam.m`,
//! `w@adam.v` and its step count as the one-element tensor `w@adam.t`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 7] = b"CKPTV01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub global_step: u64,
    pub seed: u64,
    pub skipped_updates: u64,
    /// Free-form `key=value` lines describing the run.
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got != n {
            return Err(Error::corrupt("checkpoint", format!("truncated while reading {what}")));
        }
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str, limit: u64) -> Result<usize> {
        let v = self.u64(what)?;
        if v > limit {
            return Err(Error::corrupt("checkpoint", format!("{what} {v} exceeds limit {limit}")));
        }
        Ok(v as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what, 1 << 24)?;
        String::from_utf8(self.bytes(n, what)?)
            .map_err(|_| Error::corrupt("checkpoint", format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        put_u64(&mut w, self.global_step)?;
        put_u64(&mut w, self.seed)?;
        put_u64(&mut w, self.skipped_updates)?;
        put_str(&mut w, &self.meta)?;
        put_u64(&mut w, self.tensors.len() as u64)?;
        for t in &self.tensors {
            put_str(&mut w, &t.name)?;
            put_u64(&mut w, t.shape.len() as u64)?;
            for &d in &t.shape {
                put_u64(&mut w, d as u64)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader { inner: r };
        let magic = r.bytes(7, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::corrupt("checkpoint", "bad magic (expected CKPTV01)"));
        }
        let global_step = r.u64("global step")?;
        let seed = r.u64("seed")?;
        let skipped_updates = r.u64("skip counter")?;
        let meta = r.string("meta")?;
        let count = r.len("tensor count", 1 << 20)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.len("rank", 8)?;
            let shape = (0..rank).map(|_| r.len("dimension", 1 << 32)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= 1 << 32);
            let n = n.ok_or_else(|| Error::corrupt("checkpoint", format!("tensor {name} is implausibly large")))?;
            let data = r.bytes(n * 4, &name)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.inner.read(&mut rest)? != 0 {
            return Err(Error::corrupt("checkpoint", "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { global_step, seed, skipped_updates, meta, tensors })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Appends every parameter and its optimizer state.
    pub fn push_store(&mut self, store: &ParamStore<f32>) {
        for p in store.params() {
            let shape = p.value.shape().to_vec();
            self.tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: shape.clone(),
                data: p.value.data().to_vec(),
            });
            self.tensors.push(NamedTensor {
                name: format!("{}@adam.m", p.name),
                shape: shape.clone(),
                data: p.adam_m.clone(),
            });
            self.tensors.push(NamedTensor { name: format!("{}@adam.v", p.name), shape, data: p.adam_v.clone() });
            self.tensors.push(NamedTensor {
                name: format!("{}@adam.t", p.name),
                shape: vec![1],
                data: vec![p.adam_t as f32],
            });
        }
        self.skipped_updates = store.skipped_updates;
    }

    /// Overwrites every parameter of `store` (values and optimizer state)
    /// from this checkpoint. All parameters must be present with matching
    /// shapes.
    pub fn load_store(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<&NamedTensor> {
            let t = self.tensor(name).ok_or_else(|| Error::corrupt("checkpoint", format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::corrupt(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape),
                ));
            }
            Ok(t)
        };
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            let value = fetch(&p.name, &shape)?;
            let m = fetch(&format!("{}@adam.m", p.name), &shape)?;
            let v = fetch(&format!("{}@adam.v", p.name), &shape)?;
            let t = fetch(&format!("{}@adam.t", p.name), &[1])?;
            p.value = Tensor::from_vec(&shape, value.data.clone())?;
            p.value.requires_grad = true;
            p.adam_m.clone_from(&m.data);
            p.adam_v.clone_from(&v.data);
            let step = t.data[0];
            if !(step >= 0.0 && step.fract() == 0.0) {
                return Err(Error::corrupt("checkpoint", format!("invalid Adam step {step} for {}", p.name)));
            }
            p.adam_t = step as u64;
        }
        store.skipped_updates = self.skipped_updates;
        Ok(())
    }
}
