//! Checkpoint file format.
//!
//! Layout: magic bytes `MFGD`, format version u32 (little-endian), then
//! repeated records `{name_len: u32, name bytes, dtype tag: u8, rank: u32,
//! dims: u64 each, raw little-endian data}`. Round trips are bit-exact.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFGD";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file at byte {} (wanted {n} more)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut store = ParamStore::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype tag {dtype} for {name:?}"
            )));
        }
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        // Bit-exactness matters more than finiteness screening here.
        store.insert(name, Tensor::raw(shape, data));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.insert(
            "enc2d.conv1.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 1e-300, 3.5, -7.25, 0.0]).unwrap(),
        );
        store.insert("mlp.b", Tensor::new(vec![4], vec![1.5, 2.5, -3.5, 4.5]).unwrap());
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.names(), store.names());
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
