//! File formats.
//!
//! Binary tensors (`PCNT`) and kernels (`PCNW`) share a header of a 4-byte
//! magic, a `u32` version and three `u32` dimensions, followed by
//! little-endian `f32` values. Masks (`PCNM`), labels and configurations
//! are line-oriented text. Every writer is the exact inverse of its reader.

use std::fs;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::{MaskKind, PerforationMask, WeightField};
use crate::tensor::{KernelTensor, Pos, SpatialIndexSet, Tensor3};

pub const TENSOR_MAGIC: &[u8; 4] = b"PCNT";
pub const KERNEL_MAGIC: &[u8; 4] = b"PCNW";
pub const MASK_MAGIC: &str = "PCNM";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: [usize; 3]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a header; `Ok(None)` on a clean end of stream.
fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &'static str) -> Result<Option<[usize; 3]>> {
    let mut m = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut m[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::format(what, "truncated header")),
            k => got += k,
        }
    }
    if &m != magic {
        return Err(Error::format(
            what,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
        ));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(what, format!("unsupported version {version}")));
    }
    Ok(Some([read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize]))
}

fn write_values(w: &mut impl Write, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_values(r: &mut impl Read, len: usize, what: &'static str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; len * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(what, format!("expected {len} values")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor3<f32>) -> Result<()> {
    write_header(w, TENSOR_MAGIC, [t.height(), t.width(), t.channels()])?;
    write_values(w, t.as_slice())
}

/// Next tensor in the stream, or `None` at its end.
pub fn read_tensor_opt(r: &mut impl Read) -> Result<Option<Tensor3<f32>>> {
    let Some([x, y, s]) = read_header(r, TENSOR_MAGIC, "tensor file")? else {
        return Ok(None);
    };
    let values = read_values(r, x * y * s, "tensor file")?;
    Tensor3::from_vec(x, y, s, values).map(Some)
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor3<f32>> {
    read_tensor_opt(r)?.ok_or_else(|| Error::format("tensor file", "empty stream"))
}

pub fn write_kernel(w: &mut impl Write, k: &KernelTensor<f32>) -> Result<()> {
    write_header(w, KERNEL_MAGIC, [k.size(), k.in_channels(), k.out_channels()])?;
    write_values(w, k.as_slice())
}

pub fn read_kernel_opt(r: &mut impl Read) -> Result<Option<KernelTensor<f32>>> {
    let Some([d, s, t]) = read_header(r, KERNEL_MAGIC, "weight file")? else {
        return Ok(None);
    };
    let values = read_values(r, d * d * s * t, "weight file")?;
    KernelTensor::from_vec(d, s, t, values).map(Some)
}

pub fn read_kernel(r: &mut impl Read) -> Result<KernelTensor<f32>> {
    read_kernel_opt(r)?.ok_or_else(|| Error::format("weight file", "empty stream"))
}

pub fn save_tensor(path: &Path, t: &Tensor3<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor3<f32>> {
    read_tensor(&mut fs::read(path)?.as_slice())
}

/// Concatenated tensors, e.g. a dataset's images.
pub fn save_tensors(path: &Path, ts: &[Tensor3<f32>]) -> Result<()> {
    let mut buf = Vec::new();
    for t in ts {
        write_tensor(&mut buf, t)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor3<f32>>> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut out = Vec::new();
    while let Some(t) = read_tensor_opt(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

/// A weight field stored as an `X′ × Y′ × 1` tensor.
pub fn save_weight_field(path: &Path, w: &WeightField) -> Result<()> {
    let (xp, yp) = w.dims();
    let t = Tensor3::from_vec(xp, yp, 1, w.values().iter().map(|&v| v as f32).collect())?;
    save_tensor(path, &t)
}

pub fn load_weight_field(path: &Path) -> Result<WeightField> {
    let t = load_tensor(path)?;
    if t.channels() != 1 {
        return Err(Error::format("weight field", format!("{} channels, expected 1", t.channels())));
    }
    WeightField::new(t.height(), t.width(), t.as_slice().iter().map(|&v| v as f64).collect())
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, what: &'static str, line: usize) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(what, format!("line {line}: expected a number")))
}

pub fn mask_to_string(mask: &PerforationMask) -> String {
    let (xp, yp) = mask.dims();
    let mut s = format!("{MASK_MAGIC} {xp} {yp} {}\n", mask.len());
    for p in mask.positions() {
        s.push_str(&format!("{} {}\n", p.x, p.y));
    }
    s
}

/// Parses a mask file. The generator is not recorded, so the result is
/// tagged [`MaskKind::Custom`].
pub fn mask_from_str(text: &str) -> Result<PerforationMask> {
    const WHAT: &str = "mask file";
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format(WHAT, "empty file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some(MASK_MAGIC) {
        return Err(Error::format(WHAT, format!("header must start with {MASK_MAGIC}")));
    }
    let xp: usize = parse_field(tok.next(), WHAT, 1)?;
    let yp: usize = parse_field(tok.next(), WHAT, 1)?;
    let n: usize = parse_field(tok.next(), WHAT, 1)?;
    let mut pos = Vec::with_capacity(n);
    for (i, line) in lines {
        let mut t = line.split_whitespace();
        let x = parse_field(t.next(), WHAT, i + 1)?;
        let y = parse_field(t.next(), WHAT, i + 1)?;
        if t.next().is_some() {
            return Err(Error::format(WHAT, format!("line {}: trailing fields", i + 1)));
        }
        pos.push(Pos::new(x, y));
    }
    if pos.len() != n {
        return Err(Error::format(WHAT, format!("header declares {n} positions, found {}", pos.len())));
    }
    Ok(PerforationMask::from_set(SpatialIndexSet::new(xp, yp, pos)?, MaskKind::Custom, 0))
}

pub fn save_mask(path: &Path, mask: &PerforationMask) -> Result<()> {
    fs::write(path, mask_to_string(mask))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<PerforationMask> {
    mask_from_str(&fs::read_to_string(path)?)
}

/// One integer class label per line.
pub fn write_labels(w: &mut impl Write, labels: &[usize]) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_labels(r: impl BufRead) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse()
                .map_err(|_| Error::format("label file", format!("line {}: `{line}` is not a label", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::uniform_mask;

    #[test]
    fn tensor_round_trip_is_byte_identical() {
        let t = Tensor3::from_fn(3, 4, 2, |x, y, s| (x * 8 + y * 2 + s) as f32 * 0.37 - 1.0);
        let mut a = Vec::new();
        write_tensor(&mut a, &t).unwrap();
        assert_eq!(a.len(), HEADER_BYTES + 24 * 4);
        let back = read_tensor(&mut a.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut b = Vec::new();
        write_tensor(&mut b, &back).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_round_trip() {
        let k = KernelTensor::from_fn(3, 2, 4, |i, j, s, t| (i + 2 * j + 3 * s + 5 * t) as f32 / 7.0);
        let mut a = Vec::new();
        write_kernel(&mut a, &k).unwrap();
        assert_eq!(&a[..4], b"PCNW");
        assert_eq!(read_kernel(&mut a.as_slice()).unwrap(), k);
        assert!(read_tensor(&mut a.as_slice()).is_err());
    }

    #[test]
    fn truncated_and_stream_end() {
        let t = Tensor3::<f32>::zeros(2, 2, 1);
        let mut a = Vec::new();
        write_tensor(&mut a, &t).unwrap();
        write_tensor(&mut a, &t).unwrap();
        let mut r = a.as_slice();
        assert!(read_tensor_opt(&mut r).unwrap().is_some());
        assert!(read_tensor_opt(&mut r).unwrap().is_some());
        assert!(read_tensor_opt(&mut r).unwrap().is_none());
        assert!(read_tensor(&mut &a[..a.len() - 1]).is_ok());
        let short = &a[..HEADER_BYTES + 3];
        assert!(read_tensor(&mut &short[..]).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = uniform_mask(9, 7, 20, 3).unwrap();
        let s = mask_to_string(&m);
        assert!(s.starts_with("PCNM 9 7 20\n"));
        let back = mask_from_str(&s).unwrap();
        assert_eq!(back.positions(), m.positions());
        assert_eq!(mask_to_string(&back), s);
        assert!(mask_from_str("PCNM 3 3 2\n1 1\n").is_err());
        assert!(mask_from_str("PCNM 3 3 1\n4 1\n").is_err());
        assert!(mask_from_str("XXXX 3 3 1\n1 1\n").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let l = vec![3, 0, 9, 1];
        let mut a = Vec::new();
        write_labels(&mut a, &l).unwrap();
        assert_eq!(read_labels(a.as_slice()).unwrap(), l);
        assert!(read_labels("1\nx\n".as_bytes()).is_err());
    }
}
