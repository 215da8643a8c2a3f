use super::{check_input, has_converged, DecompSettings, FitTrace, Method};
use crate::error::{Error, Result};
use crate::tensor::{mode_n_product, svd, unfold, DenseTensor, Matrix};

/// `T ~ G x_0 U_0 x_1 U_1 ...` with orthonormal factor columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    pub core: DenseTensor,
    pub factors: Vec<Matrix>,
}

impl TuckerFactors {
    pub fn new(core: DenseTensor, factors: Vec<Matrix>) -> Result<Self> {
        if core.order() != factors.len() {
            return Err(Error::invalid(format!("core of order {} with {} factors", core.order(), factors.len())));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.cols() != core.shape()[n] {
                return Err(Error::invalid(format!(
                    "factor {n} has {} columns, core extent is {}",
                    f.cols(),
                    core.shape()[n]
                )));
            }
        }
        Ok(Self { core, factors })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        self.factors.iter().enumerate().try_fold(self.core.clone(), |acc, (n, f)| mode_n_product(&acc, f, n))
    }
}

/// Per-mode ranks: the uniform rank clipped to each mode's extent and to the
/// product of the other extents.
pub(crate) fn clipped_ranks(shape: &[usize], rank: usize) -> Vec<usize> {
    let total: usize = shape.iter().product();
    shape.iter().map(|&n| rank.min(n).min(total / n)).collect()
}

fn leading_left_vectors(m: &Matrix, k: usize) -> Result<Matrix> {
    svd(m)?.u.leading_columns(k)
}

/// Projects `t` onto all factors except `skip`.
fn project_except(t: &DenseTensor, factors: &[Matrix], skip: Option<usize>) -> Result<DenseTensor> {
    factors
        .iter()
        .enumerate()
        .filter(|(n, _)| Some(*n) != skip)
        .try_fold(t.clone(), |acc, (n, f)| mode_n_product(&acc, &f.transpose(), n))
}

pub fn tucker_decompose(t: &DenseTensor, s: &DecompSettings) -> Result<TuckerFactors> {
    tucker_decompose_traced(t, s).map(|(f, _)| f)
}

/// HOSVD initialization followed by HOOI sweeps.
pub fn tucker_decompose_traced(t: &DenseTensor, s: &DecompSettings) -> Result<(TuckerFactors, FitTrace)> {
    s.expect(Method::Tucker)?;
    check_input(t)?;
    let shape = t.shape();
    let ranks = clipped_ranks(shape, s.rank);
    let norm = t.frobenius_norm();

    let mut factors: Vec<Matrix> =
        ranks.iter().enumerate().map(|(n, &r)| leading_left_vectors(&unfold(t, n)?, r)).collect::<Result<_>>()?;
    let mut model = TuckerFactors { core: project_except(t, &factors, None)?, factors: factors.clone() };
    let mut errors = vec![model.reconstruct()?.distance(t)?];

    // The first HOOI sweep always runs, even when HOSVD is already exact.
    // A sweep that raises the error is rolled back and ends the run.
    let mut converged = norm == 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < s.max_iters {
        sweeps += 1;
        let last = model.clone();
        for n in 0..shape.len() {
            let y = project_except(t, &factors, Some(n))?;
            factors[n] = leading_left_vectors(&unfold(&y, n)?, ranks[n])?;
        }
        model = TuckerFactors { core: project_except(t, &factors, None)?, factors: factors.clone() };
        let err = model.reconstruct()?.distance(t)?;
        if !err.is_finite() {
            return Err(Error::numerical("HOOI reconstruction error is not finite"));
        }
        let prev = *errors.last().expect("non-empty");
        if err > prev {
            model = last;
            converged = true;
            break;
        }
        errors.push(err);
        converged = has_converged(prev, err, norm, s.tolerance);
    }

    let trace = FitTrace { input_norm: norm, errors, sweeps, converged, truncation_error: None };
    Ok((model, trace))
}
