//! Binary checkpoint format.
//!
//! Layout: magic `"CSGN"`, `u32` version, `u32` tensor count; then per
//! tensor: `u16` name length, UTF-8 name, `u8` rank, one `u32` per
//! dimension, raw little-endian `f64` values. Round-trips byte-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSGN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(tensors.len()).map_err(|_| {
        Error::Format("checkpoint: too many tensors".into())
    })?.to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("checkpoint: name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        if t.shape().len() > u8::MAX as usize {
            return Err(Error::Format("checkpoint: rank too large".into()));
        }
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format("checkpoint: dimension too large".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "checkpoint: bad magic {magic:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("checkpoint: name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    // trailing bytes mean a corrupt or mismatched file
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(out),
        _ => Err(Error::Format("checkpoint: trailing bytes".into())),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, -0.0, f64::MIN_POSITIVE])
            .unwrap();
        let b = Tensor::scalar(42.0);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &[("enc.w".into(), &a), ("head.b".into(), &b)]).unwrap();

        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "enc.w");
        assert!(loaded[0].1.bit_eq(&a));
        assert!(loaded[1].1.bit_eq(&b));

        let refs: Vec<(String, &Tensor)> =
            loaded.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&p2, &refs).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn header_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::scalar(1.0);
        let p = dir.path().join("t.ckpt");
        save_checkpoint(&p, &[("x".into(), &t)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], b"CSGN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &1u16.to_le_bytes()); // name length
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 1); // rank
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes()); // dim
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(load_checkpoint(&p).is_err());

        let t = Tensor::scalar(1.0);
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, &[("x".into(), &t)]).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
