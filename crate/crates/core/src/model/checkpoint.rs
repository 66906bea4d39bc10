//! Binary checkpoint format.
//!
//! ```text
//! "SMOE" | version u32 | count u32 | per tensor:
//!     name_len u16 | name (UTF-8) | rank u8 | dims u32 × rank | f32 × numel
//! ```
//! All integers and floats are little endian.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMOE";
pub const FORMAT_VERSION: u32 = 1;

/// Rounds every parameter to `f32`, the precision checkpoints store.
pub fn quantize_params(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let q = store.get(id).quantized_f32();
        *store.get_mut(id) = q;
    }
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * store.total_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(|_| too_big("tensor count"))?.to_le_bytes());
    for (_, name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| too_big("name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| too_big("rank"))?);
        for &d in t.dims() {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dim"))?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Format(format!("{what} does not fit the checkpoint format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into a fresh store, in file order.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("dims of {name} overflow")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| too_big("payload"))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        store.add(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Overwrites every parameter of `store` with the tensor of the same name
/// in the checkpoint. Names and dims must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
        store
            .set(id, loaded.get(src).clone())
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap());
        s.add("bias", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"SMOE");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes());
        assert_eq!(bytes[14], b'a');
        assert_eq!(bytes[15], 2);
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.5f32.to_le_bytes());
        let expected = 12 + (2 + 1 + 1 + 8 + 16) + (2 + 4 + 1 + 4 + 12);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn round_trip_after_quantize() {
        let mut s = sample();
        quantize_params(&mut s);
        let back = decode(&encode(&s).unwrap()).unwrap();
        for ((_, n1, t1), (_, n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn load_into_checks_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.smoe");
        save(&path, &sample()).unwrap();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[2, 2]));
        other.add("b", Tensor::zeros(&[3]));
        assert!(matches!(load_into(&path, &mut other), Err(Error::Format(_))));
        let mut same = sample();
        *same.get_mut(same.find("a").unwrap()) = Tensor::zeros(&[2, 2]);
        load_into(&path, &mut same).unwrap();
        assert_eq!(same.get(same.find("a").unwrap()).at(0, 0), 1.5);
    }
}
