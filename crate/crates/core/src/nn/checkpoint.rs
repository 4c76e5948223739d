//! Binary parameter checkpoints: `"MVGZ"`, `u32` version, `u32` tensor
//! count, then per tensor `u16` name length, name bytes, `u32` rank,
//! `u32` dims, and `f32` data, all little endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::scalar::Real;

use super::tensor::{Parameterized, Tensor};
use super::NnError;

pub const MAGIC: &[u8; 4] = b"MVGZ";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(model: &impl Parameterized<T>) -> Vec<u8> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit("", &mut |name, t: &Tensor<T>| {
        tensors.push((name.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.as_f64() as f32).collect()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `name → (shape, values)`.
pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::Checkpoint("non-utf8 name".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| NnError::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Overwrites every parameter of `model` from `bytes`; names and shapes
/// must match exactly.
pub fn load_into<T: Real>(model: &mut impl Parameterized<T>, bytes: &[u8]) -> Result<(), NnError> {
    let mut tensors = decode(bytes)?;
    let mut err = None;
    model.visit_mut("", &mut |name, t: &mut Tensor<T>| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some((shape, data)) if shape == t.shape() => {
                t.data_mut().iter_mut().zip(data).for_each(|(d, v)| *d = T::lit(v as f64));
            }
            Some((shape, _)) => {
                err = Some(NnError::Checkpoint(format!("{name}: shape {shape:?} != {:?}", t.shape())));
            }
            None => err = Some(NnError::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(NnError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

pub fn save<T: Real>(model: &impl Parameterized<T>, path: impl AsRef<Path>) -> Result<(), NnError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load<T: Real>(model: &mut impl Parameterized<T>, path: impl AsRef<Path>) -> Result<(), NnError> {
    load_into(model, &std::fs::read(path)?)
}
