//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "RFAT" | version u32 | count u32 |
//!   count × ( name_len u32 | name UTF-8 | rank u32 | extents u32×rank | data f32×numel ) |
//! crc32 u32 of every preceding byte
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RFAT";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, VERSION as usize);
    put(&mut out, store.len());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank());
        for &e in t.extents() {
            put(&mut out, e);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Named tensors in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        let rank = r.u32()?;
        let extents = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = extents.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("`{name}` extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&extents, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(out)
}

/// Copies checkpoint tensors into `store`. Every parameter must be present
/// with the same extents and no extra tensors are allowed; all mismatches are
/// listed in the error.
pub fn restore(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut problems = Vec::new();
    let mut found = vec![false; store.len()];
    let mut updates = Vec::new();
    for (name, t) in tensors {
        match store.find(&name) {
            None => problems.push(format!("unexpected tensor `{name}`")),
            Some(id) => {
                found[id.index()] = true;
                if store.get(id).extents() != t.extents() {
                    problems.push(format!(
                        "`{name}`: checkpoint extents {:?}, model expects {:?}",
                        t.extents(),
                        store.get(id).extents()
                    ));
                } else {
                    updates.push((id, t));
                }
            }
        }
    }
    for (i, f) in found.iter().enumerate() {
        if !f {
            problems.push(format!("missing tensor `{}`", store.names()[i]));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint does not match model ({} problems): {}",
            problems.len(),
            problems.join("; ")
        )));
    }
    for (id, t) in updates {
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
