//! Low-rank decompositions of dense tensors: CP by alternating least squares,
//! Tucker by HOSVD with HOOI refinement, and Tensor-Train by sequential SVD.
//!
//! A single integer rank drives all three. CP uses it as the number of
//! rank-one terms; Tucker uses it for every mode, clipped to what the mode
//! can support; TT uses it as a cap on every bond rank.

mod cp;
mod io;
mod tt;
mod tucker;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cp::{cp_decompose, cp_decompose_traced, CpFactors, CP_RIDGE};
pub use io::{read_factors, read_factors_from, write_factors, write_factors_to, FACTORS_MAGIC};
pub use tt::{tt_decompose, tt_decompose_traced, TtCores, TT_RELATIVE_CUTOFF};
pub use tucker::{tucker_decompose, tucker_decompose_traced, TuckerFactors};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "CP")]
    Cp,
    #[serde(alias = "TUCKER")]
    Tucker,
    #[serde(alias = "TT")]
    Tt,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cp, Method::Tucker, Method::Tt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cp => "cp",
            Method::Tucker => "tucker",
            Method::Tt => "tt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cp" | "parafac" | "candecomp" => Ok(Method::Cp),
            "tucker" => Ok(Method::Tucker),
            "tt" | "tensor-train" | "tensor_train" => Ok(Method::Tt),
            other => Err(Error::invalid(format!("unknown decomposition method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompSettings {
    pub method: Method,
    pub rank: usize,
    /// Sweep cap for CP-ALS and HOOI. TT-SVD is not iterative.
    pub max_iters: usize,
    /// Stop once the relative change of the reconstruction error between
    /// successive sweeps drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl DecompSettings {
    pub const DEFAULT_MAX_ITERS: usize = 50;
    pub const DEFAULT_TOLERANCE: f64 = 1e-4;

    pub fn new(method: Method, rank: usize) -> Self {
        Self { method, rank, max_iters: Self::DEFAULT_MAX_ITERS, tolerance: Self::DEFAULT_TOLERANCE, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::invalid(format!("settings are for {}, called {} decomposition", self.method, method)));
        }
        self.validate()
    }
}

/// Convergence record of one decomposition call.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Frobenius norm of the input.
    pub input_norm: f64,
    /// Absolute reconstruction error after initialization and after every
    /// sweep. TT records a single entry.
    pub errors: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// TT only: `sqrt(sum of discarded singular values squared)`.
    pub truncation_error: Option<f64>,
}

impl FitTrace {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trace always has an entry")
    }

    pub fn relative_error(&self) -> f64 {
        relative(self.final_error(), self.input_norm)
    }
}

pub(crate) fn relative(err: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        err / norm
    } else {
        err
    }
}

/// Relative change between successive errors, with an absolute floor so
/// that exact fits count as converged.
pub(crate) fn has_converged(prev: f64, cur: f64, norm: f64, tol: f64) -> bool {
    if cur <= 1e-12 * norm || norm == 0.0 {
        return true;
    }
    (prev - cur).abs() / prev.max(f64::MIN_POSITIVE) < tol
}

pub(crate) fn check_input(t: &DenseTensor) -> Result<()> {
    if t.order() < 2 {
        return Err(Error::invalid(format!("decomposition needs order >= 2, got shape {:?}", t.shape())));
    }
    if !t.is_finite() {
        return Err(Error::invalid("tensor has non-finite entries"));
    }
    Ok(())
}

/// The result of any of the three decompositions.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Cp(CpFactors),
    Tucker(TuckerFactors),
    Tt(TtCores),
}

impl Factors {
    pub fn method(&self) -> Method {
        match self {
            Factors::Cp(_) => Method::Cp,
            Factors::Tucker(_) => Method::Tucker,
            Factors::Tt(_) => Method::Tt,
        }
    }

    /// CP: `[R]`; Tucker: multilinear ranks; TT: inner bond ranks.
    pub fn ranks(&self) -> Vec<usize> {
        match self {
            Factors::Cp(f) => vec![f.rank()],
            Factors::Tucker(f) => f.ranks(),
            Factors::Tt(f) => f.bond_ranks(),
        }
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        match self {
            Factors::Cp(f) => f.reconstruct(),
            Factors::Tucker(f) => f.reconstruct(),
            Factors::Tt(f) => f.reconstruct(),
        }
    }
}

pub fn decompose(t: &DenseTensor, s: &DecompSettings) -> Result<Factors> {
    decompose_traced(t, s).map(|(f, _)| f)
}

pub fn decompose_traced(t: &DenseTensor, s: &DecompSettings) -> Result<(Factors, FitTrace)> {
    Ok(match s.method {
        Method::Cp => {
            let (f, tr) = cp_decompose_traced(t, s)?;
            (Factors::Cp(f), tr)
        }
        Method::Tucker => {
            let (f, tr) = tucker_decompose_traced(t, s)?;
            (Factors::Tucker(f), tr)
        }
        Method::Tt => {
            let (f, tr) = tt_decompose_traced(t, s)?;
            (Factors::Tt(f), tr)
        }
    })
}

/// Decompose and immediately rebuild a dense approximation.
pub fn low_rank_approximation(t: &DenseTensor, s: &DecompSettings) -> Result<DenseTensor> {
    decompose(t, s)?.reconstruct()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing() {
        assert_eq!("TT".parse::<Method>().unwrap(), Method::Tt);
        assert_eq!("tucker".parse::<Method>().unwrap(), Method::Tucker);
        assert_eq!("Cp".parse::<Method>().unwrap(), Method::Cp);
        assert!("svd".parse::<Method>().is_err());
        let m: Method = serde_json::from_str("\"TUCKER\"").unwrap();
        assert_eq!(m, Method::Tucker);
    }

    #[test]
    fn settings_validation() {
        assert!(DecompSettings::new(Method::Tt, 0).validate().is_err());
        let mut s = DecompSettings::new(Method::Cp, 2);
        s.tolerance = 0.0;
        assert!(s.validate().is_err());
        s.tolerance = 1e-4;
        s.max_iters = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn order_one_rejected() {
        let v = DenseTensor::new(vec![4], vec![1.0; 4]).unwrap();
        for m in Method::ALL {
            assert!(decompose(&v, &DecompSettings::new(m, 1)).is_err());
        }
    }
}
