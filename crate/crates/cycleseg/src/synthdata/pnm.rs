//! Binary PPM (P6) images and PGM (P5) masks.
//!
//! Images are written as `round(v * 255)` and read back as `k / 255`, so a
//! write-read-write cycle is byte-identical. Masks are strictly 0 or 255 on
//! disk and 0.0 or 1.0 in memory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("ppm wants 3 channels, got {c}")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for ch in 0..3 {
                row.push(quantize(image.data()[ch * plane + y * w + x]));
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, data_off) = parse_header(&bytes, b"P6")?;
    let need = w * h * 3;
    let data = &bytes[data_off..];
    if data.len() != need {
        return Err(Error::Format(format!(
            "ppm: expected {need} data bytes, found {}",
            data.len()
        )));
    }
    let plane = w * h;
    let mut values = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                values[ch * plane + y * w + x] = data[(y * w + x) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], values)
}

pub fn write_pgm(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = mask_dims(mask)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, data_off) = parse_header(&bytes, b"P5")?;
    let data = &bytes[data_off..];
    if data.len() != w * h {
        return Err(Error::Format(format!(
            "pgm: expected {} data bytes, found {}",
            w * h,
            data.len()
        )));
    }
    let values: Vec<f64> = data
        .iter()
        .map(|&b| if b > 127 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, 1, h, w], values)
}

fn mask_dims(mask: &Tensor) -> Result<(usize, usize)> {
    match mask.shape() {
        &[1, 1, h, w] => Ok((h, w)),
        &[h, w] => Ok((h, w)),
        other => Err(Error::shape(format!("mask shape {other:?}"))),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses `<magic> <width> <height> <maxval>` with netpbm whitespace and
/// `#` comments, returning the offset of the raster data (one whitespace
/// byte after maxval).
fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad netpbm header field".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!(
            "unsupported maxval {} (want 255)",
            fields[2]
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace before raster data".into()));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 256) as f64 / 255.0);
        let p1 = dir.path().join("a.ppm");
        write_ppm(&p1, &img).unwrap();
        let bytes = std::fs::read(&p1).unwrap();
        assert!(bytes.starts_with(b"P6\n64 64\n255\n"));

        let back = read_ppm(&p1).unwrap();
        assert_eq!(back.shape(), &[1, 3, 64, 64]);
        let p2 = dir.path().join("b.ppm");
        write_ppm(&p2, &back).unwrap();
        assert_eq!(bytes, std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_round_trip_is_identity_on_masks() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Tensor::from_fn(&[1, 1, 9, 7], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &mask).unwrap();
        let back = read_pgm(&p).unwrap();
        assert!(back.bit_eq(&mask));
    }

    #[test]
    fn all_black_mask_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Tensor::zeros(&[1, 1, 64, 64]);
        let p = dir.path().join("black.pgm");
        write_pgm(&p, &mask).unwrap();
        let header = "P5\n64 64\n255\n".len();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, header + 4096);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        for bytes in [
            b"P7\n2 2\n255\n\0\0\0\0".as_slice(),
            b"P5\n2 2\n254\n\0\0\0\0".as_slice(),
            b"P5\n2\n255\n\0\0\0\0".as_slice(),
            b"P5\n2 2\n255\n\0\0".as_slice(), // short data
        ] {
            std::fs::write(&p, bytes).unwrap();
            assert!(read_pgm(&p).is_err(), "accepted {bytes:?}");
        }
        // comments are fine
        std::fs::write(&p, b"P5\n# gimp\n2 2\n255\n\0\0\0\0").unwrap();
        assert!(read_pgm(&p).is_ok());
    }
}
