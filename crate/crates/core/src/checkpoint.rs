//! Versioned binary checkpoint container.
//!
//! Layout: magic `OTSV`, u32 schema version, u32 entry count, a manifest of
//! (name, shape, offset) records, a u64 blob length, then all tensor data as
//! little-endian IEEE-754 f32 in manifest order.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{err, Result};
use crate::nn::ParameterStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"OTSV";
pub const SCHEMA_VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParameterStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    let entries: Vec<_> = store.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, e) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (e.tensor.len() * 4) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, e) in &entries {
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(err!(Checkpoint, "truncated container at byte {}", self.pos));
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
}

/// Parsed manifest plus the raw data blob.
pub struct Container<'a> {
    pub entries: Vec<(String, Vec<usize>, u64)>,
    blob: &'a [u8],
}

pub fn parse(bytes: &[u8]) -> Result<Container<'_>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(err!(Checkpoint, "bad magic, not a checkpoint container"));
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(err!(
            Checkpoint,
            "schema version mismatch: file {version}, supported {SCHEMA_VERSION}"
        ));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| err!(Checkpoint, "non-utf8 parameter name"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()?;
        entries.push((String::from(name), shape, offset));
    }
    let blob_len = r.u64()? as usize;
    let blob = r.take(blob_len)?;
    Ok(Container { entries, blob })
}

impl Container<'_> {
    pub fn tensor<T: Scalar>(&self, index: usize) -> Result<Tensor<T>> {
        let (ref name, ref shape, offset) = self.entries[index];
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + n * 4;
        if end > self.blob.len() {
            return Err(err!(Checkpoint, "entry {name} overruns data blob"));
        }
        let data: Vec<T> = self.blob[start..end]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Load values into an already-constructed store; every container entry must
/// exist with a matching shape.
pub fn decode_into<T: Scalar>(bytes: &[u8], store: &mut ParameterStore<T>) -> Result<()> {
    let c = parse(bytes)?;
    for i in 0..c.entries.len() {
        let t = c.tensor::<T>(i)?;
        store.set_value(&c.entries[i].0, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let mut store = ParameterStore::<f32>::new();
        store
            .register("frontend/conv/w", Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true)
            .unwrap();
        store
            .register("backend/out/b", Tensor::new(&[4], vec![-1., 0., 0.5, 9.]).unwrap(), true)
            .unwrap();
        let bytes = encode(&store);
        let mut copy = store.clone();
        copy.set_value("backend/out/b", Tensor::zeros(&[4])).unwrap();
        decode_into(&bytes, &mut copy).unwrap();
        assert_eq!(
            copy.get("backend/out/b").unwrap().tensor.data(),
            store.get("backend/out/b").unwrap().tensor.data()
        );
        assert_eq!(
            copy.get("frontend/conv/w").unwrap().tensor.shape(),
            &[2, 3]
        );
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut store = ParameterStore::<f32>::new();
        store.register("w", Tensor::scalar(1.0), true).unwrap();
        let mut bytes = encode(&store);
        bytes[4] = 99; // corrupt version
        assert!(parse(&bytes).is_err());
        bytes[0] = b'X';
        assert!(parse(&bytes).is_err());
        assert!(parse(&[1, 2, 3]).is_err());
    }

    #[test]
    fn f64_store_serializes_as_f32() {
        let mut store = ParameterStore::<f64>::new();
        store
            .register("w", Tensor::new(&[2], vec![0.25, -1.5]).unwrap(), true)
            .unwrap();
        let bytes = encode(&store);
        let mut back = ParameterStore::<f64>::new();
        back.register("w", Tensor::zeros(&[2]), true).unwrap();
        decode_into(&bytes, &mut back).unwrap();
        assert_eq!(back.get("w").unwrap().tensor.data(), &[0.25, -1.5]);
    }
}
