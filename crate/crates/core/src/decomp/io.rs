//! Decomposition container: a header record followed by TDF1 frames.
//!
//! ```text
//! bytes 0..4   magic "TDFC" (54 44 46 43)
//! byte  4      method tag: 1 = CP, 2 = Tucker, 3 = TT
//! u32 LE       number of rank entries k, then k x u32 LE ranks
//! u32 LE       number of frames f, then f TDF1 tensors back to back
//! ```
//!
//! Frames per method:
//! - CP: weights (order 1, length R), then one order-2 factor per mode.
//! - Tucker: core, then one order-2 factor per mode.
//! - TT: the order-3 cores in chain order.
//!
//! The ranks in the header are informational (CP: `[R]`, Tucker: core
//! shape, TT: inner bond ranks) and are checked against the frames on read.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CpFactors, Factors, Method, TtCores, TuckerFactors};
use crate::error::{Error, Result};
use crate::tensor::{read_tdf1_from, write_tdf1_to, DenseTensor, Matrix};

pub const FACTORS_MAGIC: [u8; 4] = *b"TDFC";

fn tag(m: Method) -> u8 {
    match m {
        Method::Cp => 1,
        Method::Tucker => 2,
        Method::Tt => 3,
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated container header".into()))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_factors_to<W: Write>(w: &mut W, f: &Factors) -> Result<()> {
    let frames: Vec<DenseTensor> = match f {
        Factors::Cp(cp) => std::iter::once(DenseTensor::new(vec![cp.rank()], cp.weights.clone())?)
            .chain(cp.factors.iter().map(|m| m.clone().into_tensor()))
            .collect(),
        Factors::Tucker(tk) => {
            std::iter::once(tk.core.clone()).chain(tk.factors.iter().map(|m| m.clone().into_tensor())).collect()
        }
        Factors::Tt(tt) => tt.cores().to_vec(),
    };
    w.write_all(&FACTORS_MAGIC)?;
    w.write_all(&[tag(f.method())])?;
    let ranks = f.ranks();
    write_u32(w, ranks.len())?;
    for r in ranks {
        write_u32(w, r)?;
    }
    write_u32(w, frames.len())?;
    for t in &frames {
        write_tdf1_to(w, t)?;
    }
    Ok(())
}

fn as_matrix(t: DenseTensor) -> Result<Matrix> {
    if t.order() != 2 {
        return Err(Error::Format(format!("expected order-2 factor, got {:?}", t.shape())));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Matrix::new(r, c, t.into_data())
}

pub fn read_factors_from<R: Read>(r: &mut R) -> Result<Factors> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated container header".into()))?;
    if head[..4] != FACTORS_MAGIC {
        return Err(Error::Format(format!("bad container magic {:02x?}", &head[..4])));
    }
    let method = match head[4] {
        1 => Method::Cp,
        2 => Method::Tucker,
        3 => Method::Tt,
        t => return Err(Error::Format(format!("unknown method tag {t}"))),
    };
    let nranks = read_u32(r)?;
    if nranks > 255 {
        return Err(Error::Format(format!("implausible rank count {nranks}")));
    }
    let ranks: Vec<usize> = (0..nranks).map(|_| read_u32(r)).collect::<Result<_>>()?;
    let nframes = read_u32(r)?;
    if nframes > 256 {
        return Err(Error::Format(format!("implausible frame count {nframes}")));
    }
    let mut frames: Vec<DenseTensor> = (0..nframes).map(|_| read_tdf1_from(r)).collect::<Result<_>>()?;

    let bad = |e: Error| Error::Format(format!("inconsistent {method} container: {e}"));
    let factors = match method {
        Method::Cp => {
            if frames.len() < 3 {
                return Err(Error::Format("CP container needs weights and >= 2 factors".into()));
            }
            let weights = frames.remove(0).into_data();
            let mats = frames.into_iter().map(as_matrix).collect::<Result<Vec<_>>>()?;
            Factors::Cp(CpFactors::new(mats, weights).map_err(bad)?)
        }
        Method::Tucker => {
            if frames.len() < 3 {
                return Err(Error::Format("Tucker container needs a core and >= 2 factors".into()));
            }
            let core = frames.remove(0);
            let mats = frames.into_iter().map(as_matrix).collect::<Result<Vec<_>>>()?;
            Factors::Tucker(TuckerFactors::new(core, mats).map_err(bad)?)
        }
        Method::Tt => Factors::Tt(TtCores::new(frames).map_err(bad)?),
    };
    if factors.ranks() != ranks {
        return Err(Error::Format(format!("header ranks {ranks:?} disagree with frames {:?}", factors.ranks())));
    }
    Ok(factors)
}

pub fn write_factors(path: impl AsRef<Path>, f: &Factors) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_factors_to(&mut w, f)?;
    w.flush()?;
    Ok(())
}

pub fn read_factors(path: impl AsRef<Path>) -> Result<Factors> {
    read_factors_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose, DecompSettings};

    #[test]
    fn container_round_trip_all_methods() {
        let t =
            DenseTensor::from_fn(vec![3, 4, 2], |i| (i[0] as f64 - 1.0) * (i[1] as f64 + 0.5) + i[2] as f64).unwrap();
        for m in Method::ALL {
            let f = decompose(&t, &DecompSettings::new(m, 2)).unwrap();
            let mut buf = Vec::new();
            write_factors_to(&mut buf, &f).unwrap();
            assert_eq!(&buf[..5], &[0x54, 0x44, 0x46, 0x43, tag(m)]);
            let back = read_factors_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn rejects_rank_mismatch() {
        let t = DenseTensor::from_fn(vec![3, 3], |i| (i[0] * 3 + i[1]) as f64).unwrap();
        let f = decompose(&t, &DecompSettings::new(Method::Tt, 2)).unwrap();
        let mut buf = Vec::new();
        write_factors_to(&mut buf, &f).unwrap();
        // First rank entry lives right after the 4-byte count.
        buf[9] = 7;
        assert!(matches!(read_factors_from(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
