use super::{check_input, DecompSettings, FitTrace, Method};
use crate::error::{Error, Result};
use crate::tensor::{svd, DenseTensor, Matrix};

/// Singular values at or below this fraction of the largest are treated as
/// numerical zeros when choosing a bond rank.
pub const TT_RELATIVE_CUTOFF: f64 = 1e-12;

/// Chain of order-3 cores `G_k` with shape `(r_{k-1}, n_k, r_k)` and
/// `r_0 = r_d = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TtCores {
    cores: Vec<DenseTensor>,
}

impl TtCores {
    pub fn new(cores: Vec<DenseTensor>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::invalid("TT needs at least one core"));
        }
        if cores.iter().any(|c| c.order() != 3) {
            return Err(Error::invalid("TT cores must have order 3"));
        }
        if cores[0].shape()[0] != 1 || cores[cores.len() - 1].shape()[2] != 1 {
            return Err(Error::invalid("TT boundary ranks must be 1"));
        }
        for (k, w) in cores.windows(2).enumerate() {
            if w[0].shape()[2] != w[1].shape()[0] {
                return Err(Error::invalid(format!(
                    "bond {k}: right rank {} does not match left rank {}",
                    w[0].shape()[2],
                    w[1].shape()[0]
                )));
            }
        }
        Ok(Self { cores })
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor> {
        self.cores
    }

    /// Inner bond ranks `r_1 .. r_{d-1}`.
    pub fn bond_ranks(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1].iter().map(|c| c.shape()[2]).collect()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.shape()[1]).collect()
    }

    /// Contracts the chain left to right. The running product is kept as a
    /// `(prod n_1..n_k) x r_k` matrix.
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let first = &self.cores[0];
        let mut acc = Matrix::new(first.shape()[1], first.shape()[2], first.data().to_vec())?;
        for core in &self.cores[1..] {
            let (r, n, r2) = (core.shape()[0], core.shape()[1], core.shape()[2]);
            let c = Matrix::new(r, n * r2, core.data().to_vec())?;
            let prod = acc.matmul(&c)?;
            acc = Matrix::new(prod.rows() * n, r2, prod.into_data())?;
        }
        DenseTensor::new(self.shape(), acc.into_data())
    }
}

pub fn tt_decompose(t: &DenseTensor, s: &DecompSettings) -> Result<TtCores> {
    tt_decompose_traced(t, s).map(|(f, _)| f)
}

/// TT-SVD: peel off one mode at a time with a truncated SVD, carrying
/// `diag(s) V^T` into the next step. Deterministic.
pub fn tt_decompose_traced(t: &DenseTensor, s: &DecompSettings) -> Result<(TtCores, FitTrace)> {
    s.expect(Method::Tt)?;
    check_input(t)?;
    let shape = t.shape();
    let d = shape.len();
    let norm = t.frobenius_norm();

    let mut cores = Vec::with_capacity(d);
    let mut discarded_sq = 0.0;
    let mut left_rank = 1usize;
    let mut rest: usize = shape.iter().product();
    let mut carry = t.data().to_vec();

    for &n in &shape[..d - 1] {
        rest /= n;
        let m = Matrix::new(left_rank * n, rest, carry)?;
        let dec = svd(&m)?;
        let smax = dec.s[0];
        let numerical = dec.s.iter().filter(|&&x| x > TT_RELATIVE_CUTOFF * smax).count().max(1);
        let r = s.rank.min(numerical);
        discarded_sq += dec.s[r..].iter().map(|x| x * x).sum::<f64>();

        let u = dec.u.leading_columns(r)?;
        cores.push(DenseTensor::new(vec![left_rank, n, r], u.into_data())?);

        // diag(s[..r]) * V[:, ..r]^T, row-major r x rest.
        let mut next = vec![0.0; r * rest];
        for (k, row) in next.chunks_exact_mut(rest).enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = dec.s[k] * dec.v.get(j, k);
            }
        }
        carry = next;
        left_rank = r;
    }
    cores.push(DenseTensor::new(vec![left_rank, shape[d - 1], 1], carry)?);

    let tt = TtCores::new(cores)?;
    let err = tt.reconstruct()?.distance(t)?;
    if !err.is_finite() {
        return Err(Error::numerical("TT reconstruction error is not finite"));
    }
    let trace = FitTrace {
        input_norm: norm,
        errors: vec![err],
        sweeps: 0,
        converged: true,
        truncation_error: Some(discarded_sq.sqrt()),
    };
    Ok((tt, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn uncapped_is_exact() {
        let t = random(vec![3, 4, 2, 3], 1);
        let (tt, trace) = tt_decompose_traced(&t, &DecompSettings::new(Method::Tt, 100)).unwrap();
        assert!(trace.final_error() <= 1e-8 * t.frobenius_norm());
        assert_eq!(tt.bond_ranks(), vec![3, 6, 3]);
        assert!(tt.reconstruct().unwrap().distance(&t).unwrap() <= 1e-8 * t.frobenius_norm());
    }

    #[test]
    fn bond_ranks_respect_cap() {
        let t = random(vec![4, 5, 6], 2);
        let tt = tt_decompose(&t, &DecompSettings::new(Method::Tt, 3)).unwrap();
        assert_eq!(tt.bond_ranks(), vec![3, 3]);
        assert_eq!(tt.cores()[0].shape(), &[1, 4, 3]);
        assert_eq!(tt.cores()[2].shape(), &[3, 6, 1]);
    }

    #[test]
    fn numerical_zeros_do_not_inflate_rank() {
        let a: Vec<f64> = (0..4).map(|i| i as f64 + 1.0).collect();
        let t = DenseTensor::from_fn(vec![4, 4, 4], |i| a[i[0]] * a[i[1]] * a[i[2]]).unwrap();
        let tt = tt_decompose(&t, &DecompSettings::new(Method::Tt, 4)).unwrap();
        assert_eq!(tt.bond_ranks(), vec![1, 1]);
    }

    #[test]
    fn rejects_broken_chains() {
        let a = DenseTensor::zeros(vec![1, 2, 2]).unwrap();
        let b = DenseTensor::zeros(vec![3, 2, 1]).unwrap();
        assert!(TtCores::new(vec![a.clone(), b]).is_err());
        let c = DenseTensor::zeros(vec![2, 2, 2]).unwrap();
        assert!(TtCores::new(vec![a, c]).is_err());
    }
}
