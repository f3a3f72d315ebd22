//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  b"DVFCKPT\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 metadata (JSON by convention)
//! count      u32
//! per tensor:
//!   name_len u32, name bytes
//!   ndim     u32, ndim x u64 dims
//!   data     prod(dims) x f64
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DVFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_archive<W: Write>(mut w: W, store: &ParamStore, metadata: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_bytes(&mut w, metadata.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        write_bytes(&mut w, p.name.as_bytes())?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in p.tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read an archive into a fresh store plus its metadata string.
pub fn read_archive<R: Read>(r: R) -> Result<(ParamStore, String)> {
    read_inner(r).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("truncated or unreadable archive: {io}")),
        other => other,
    })
}

fn read_inner<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let metadata = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.add(name, t);
    }
    Ok((store, metadata))
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn archive_round_trip(
            values in prop::collection::vec(-1e300f64..1e300, 1..40),
            meta in "[a-z{}\":0-9 ]{0,30}",
        ) {
            let mut store = ParamStore::new();
            store.add("a.w", Tensor::new(vec![values.len()], values.clone()).unwrap());
            store.add("b", Tensor::new(vec![1, 1], vec![-0.0]).unwrap());
            let mut buf = Vec::new();
            write_archive(&mut buf, &store, &meta).unwrap();
            let (back, meta_back) = read_archive(buf.as_slice()).unwrap();
            prop_assert_eq!(meta_back, meta);
            prop_assert_eq!(back.len(), 2);
            let a = back.tensor(back.id("a.w").unwrap());
            prop_assert_eq!(a.data(), values.as_slice());
            prop_assert_eq!(back.tensor(back.id("b").unwrap()).shape(), &[1, 1]);
        }
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let store = ParamStore::new();
        let mut buf = Vec::new();
        write_archive(&mut buf, &store, "").unwrap();
        let mut bad = buf.clone();
        bad[8] = 99;
        assert!(matches!(read_archive(bad.as_slice()), Err(Error::Checkpoint(_))));
        bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_archive(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_archive(&buf[..10]).is_err());
    }
}
