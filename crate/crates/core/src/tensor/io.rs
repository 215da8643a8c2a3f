//! TDF1 binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `54 44 46 31` (`"TDF1"`)            |
//! | 4            | dtype tag, `1` = f64 little-endian        |
//! | 5            | order `d`                                 |
//! | 6..6+4d      | `d` extents as `u32`                      |
//! | rest         | row-major payload, 8 bytes per element    |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DenseTensor;
use crate::error::{Error, Result};

pub const TDF1_MAGIC: [u8; 4] = *b"TDF1";
pub const DTYPE_F64: u8 = 1;

pub fn write_tdf1_to<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    let order =
        u8::try_from(t.order()).map_err(|_| Error::invalid(format!("order {} does not fit TDF1", t.order())))?;
    w.write_all(&TDF1_MAGIC)?;
    w.write_all(&[DTYPE_F64, order])?;
    for &n in t.shape() {
        let n = u32::try_from(n).map_err(|_| Error::invalid(format!("extent {n} does not fit TDF1")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads exactly one framed tensor; the reader may hold further data.
pub fn read_tdf1_from<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(truncated)?;
    if head[..4] != TDF1_MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &head[..4])));
    }
    if head[4] != DTYPE_F64 {
        return Err(Error::Format(format!("unsupported dtype tag {}", head[4])));
    }
    let order = head[5] as usize;
    if order == 0 {
        return Err(Error::Format("order 0".into()));
    }
    let mut shape = Vec::with_capacity(order);
    let mut buf4 = [0u8; 4];
    for _ in 0..order {
        r.read_exact(&mut buf4).map_err(truncated)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in {shape:?}")));
    }
    let mut payload = Vec::new();
    r.take((len as u64).saturating_mul(8)).read_to_end(&mut payload)?;
    if payload.len() != len * 8 {
        return Err(Error::Format(format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), len * 8)));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    DenseTensor::new(shape, data)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated header".into())
    } else {
        Error::Io(e)
    }
}

pub fn write_tdf1(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tdf1_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a file holding exactly one tensor; trailing bytes are rejected.
pub fn read_tdf1(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tdf1_from(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("payload longer than shape".into()));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(t: &DenseTensor) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tdf1_to(&mut buf, t).unwrap();
        buf
    }

    #[test]
    fn header_bytes() {
        let t = DenseTensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..6], &[0x54, 0x44, 0x46, 0x31, 1, 2]);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 30);
        assert_eq!(read_tdf1_from(&mut b.as_slice()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_input() {
        let t = DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_tdf1_from(&mut bad_magic.as_slice()), Err(Error::Format(_))));

        let mut bad_dtype = good.clone();
        bad_dtype[4] = 2;
        assert!(matches!(read_tdf1_from(&mut bad_dtype.as_slice()), Err(Error::Format(_))));

        let short = &good[..good.len() - 3];
        assert!(matches!(read_tdf1_from(&mut &short[..]), Err(Error::Format(_))));
    }

    #[test]
    fn file_rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tdf");
        let t = DenseTensor::new(vec![2, 2], vec![0.5; 4]).unwrap();
        write_tdf1(&p, &t).unwrap();
        assert_eq!(read_tdf1(&p).unwrap(), t);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&p, bytes).unwrap();
        assert!(read_tdf1(&p).is_err());
    }
}
