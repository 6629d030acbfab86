//! Binary tensor serialization.
//!
//! `G4DT` record: magic `G4DT`, u32 version = 1, u32 ndim, u32 dims[ndim],
//! u8 dtype code (0 = f32), then the raw little-endian payload.
//!
//! `G4DC` checkpoint: magic `G4DC`, u32 count, then per entry a u32 name
//! length, the UTF-8 name, and an embedded G4DT record. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"G4DT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"G4DC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected G4DT",
            magic
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported G4DT version {version}")));
    }
    let ndim = read_u32(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", dtype[0])));
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

pub fn write_checkpoint(w: &mut impl Write, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected G4DC",
            magic
        )));
    }
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf)
            .map_err(|e| Error::Format(format!("checkpoint entry name not UTF-8: {e}")))?;
        let t = read_tensor(r)?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN, f32::MAX])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(7.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item(), 7.5);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let entries = vec![
            ("a.weight".to_string(), Tensor::full(vec![2, 2], 1.5)),
            ("b.bias".to_string(), Tensor::zeros(vec![3])),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        assert_eq!(back[0].1.data(), entries[0].1.data());
        assert_eq!(back[1].1.shape(), &[3]);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_tensor(&mut &b"NOPE....."[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
