use rand::Rng;

use super::{check_input, has_converged, DecompSettings, FitTrace, Method};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{fold, khatri_rao, solve_spd, unfold, DenseTensor, Matrix};

/// Ridge added to the normal-equation Gram matrix before solving.
pub const CP_RIDGE: f64 = 1e-10;

/// `T ~ sum_r w_r a_r^(0) o a_r^(1) o ... `, with unit-norm (or zero) factor
/// columns and the scale held in `weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub factors: Vec<Matrix>,
    pub weights: Vec<f64>,
}

impl CpFactors {
    pub fn new(factors: Vec<Matrix>, weights: Vec<f64>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(Error::invalid("CP model needs at least two factors"));
        }
        let r = weights.len();
        if r == 0 || factors.iter().any(|f| f.cols() != r) {
            return Err(Error::invalid(format!(
                "every CP factor needs {r} columns, got {:?}",
                factors.iter().map(Matrix::cols).collect::<Vec<_>>()
            )));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("CP weights must be finite and non-negative"));
        }
        Ok(Self { factors, weights })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        let shape = self.shape();
        let first = scale_columns(&self.factors[0], &self.weights);
        let kr = khatri_rao_chain(self.factors[1..].iter())?;
        let x0 = first.matmul(&kr.transpose())?;
        fold(&x0, 0, &shape)
    }
}

fn scale_columns(m: &Matrix, w: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * w[j])
}

fn khatri_rao_chain<'a>(mut it: impl Iterator<Item = &'a Matrix>) -> Result<Matrix> {
    let first = it.next().ok_or_else(|| Error::invalid("empty khatri-rao chain"))?.clone();
    it.try_fold(first, |acc, m| khatri_rao(&acc, m))
}

/// Normalizes columns in place and returns their former norms.
fn normalize_columns(m: &mut Matrix) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut norms = vec![0.0; cols];
    for i in 0..rows {
        for (j, n) in norms.iter_mut().enumerate() {
            let v = m.get(i, j);
            *n += v * v;
        }
    }
    for n in norms.iter_mut() {
        *n = n.sqrt();
    }
    for i in 0..rows {
        for (j, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                let v = m.get(i, j);
                m.set(i, j, v / n);
            }
        }
    }
    norms
}

/// Column `r` of factor `n` is drawn from its own stream, so the initial
/// factors at rank `R + k` extend those at rank `R`.
fn init_factors(shape: &[usize], rank: usize, seed: u64) -> Vec<Matrix> {
    shape
        .iter()
        .enumerate()
        .map(|(mode, &n)| {
            let cols: Vec<Vec<f64>> = (0..rank)
                .map(|r| {
                    let mut rng = seeds::rng(seed, &[seeds::tag("cp-init"), mode as u64, r as u64]);
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
                })
                .collect();
            Matrix::from_fn(n, rank, |i, r| cols[r][i])
        })
        .collect()
}

pub fn cp_decompose(t: &DenseTensor, s: &DecompSettings) -> Result<CpFactors> {
    cp_decompose_traced(t, s).map(|(f, _)| f)
}

/// CP by alternating least squares with ridge-stabilized normal equations.
pub fn cp_decompose_traced(t: &DenseTensor, s: &DecompSettings) -> Result<(CpFactors, FitTrace)> {
    s.expect(Method::Cp)?;
    check_input(t)?;
    let shape = t.shape().to_vec();
    let d = shape.len();
    let rank = s.rank;
    let norm = t.frobenius_norm();
    let unfoldings: Vec<Matrix> = (0..d).map(|n| unfold(t, n)).collect::<Result<_>>()?;

    let mut factors = init_factors(&shape, rank, s.seed);
    let mut weights = vec![1.0; rank];
    for f in factors.iter_mut().skip(1) {
        normalize_columns(f);
    }
    weights.copy_from_slice(&normalize_columns(&mut factors[0]));

    let error_of = |factors: &[Matrix], weights: &[f64]| -> Result<f64> {
        let model = CpFactors { factors: factors.to_vec(), weights: weights.to_vec() };
        model.reconstruct()?.distance(t)
    };

    let mut errors = vec![error_of(&factors, &weights)?];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < s.max_iters {
        sweeps += 1;
        let last = (factors.clone(), weights.clone());
        for n in 0..d {
            let mut gram = Matrix::from_fn(rank, rank, |_, _| 1.0);
            for (m, f) in factors.iter().enumerate() {
                if m == n {
                    continue;
                }
                let g = f.t_matmul(f)?;
                for (a, b) in gram.data_mut().iter_mut().zip(g.data()) {
                    *a *= b;
                }
            }
            for r in 0..rank {
                let v = gram.get(r, r);
                gram.set(r, r, v + CP_RIDGE);
            }
            let kr = khatri_rao_chain(factors.iter().enumerate().filter(|(m, _)| *m != n).map(|(_, f)| f))?;
            let mttkrp = unfoldings[n].matmul(&kr)?;
            let mut updated = solve_spd(&gram, &mttkrp)?;
            if !updated.is_finite() {
                return Err(Error::numerical(format!("CP-ALS produced non-finite factor {n}")));
            }
            weights = normalize_columns(&mut updated);
            factors[n] = updated;
        }
        let err = error_of(&factors, &weights)?;
        if !err.is_finite() {
            return Err(Error::numerical("CP-ALS reconstruction error is not finite"));
        }
        let prev = *errors.last().expect("non-empty");
        // Near an exact fit the Gram matrix is too ill-conditioned for the
        // solve to be a true minimizer; a sweep that loses ground ends the run.
        if err > prev {
            (factors, weights) = last;
            converged = true;
            break;
        }
        errors.push(err);
        if has_converged(prev, err, norm, s.tolerance) {
            converged = true;
            break;
        }
    }

    let trace = FitTrace { input_norm: norm, errors, sweeps, converged, truncation_error: None };
    Ok((CpFactors { factors, weights }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> DenseTensor {
        DenseTensor::from_fn(vec![a.len(), b.len(), c.len()], |i| a[i[0]] * b[i[1]] * c[i[2]]).unwrap()
    }

    fn random(shape: Vec<usize>, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn recovers_rank_one() {
        let t = outer3(&[1.0, -2.0, 0.5], &[0.3, 1.0, 2.0, -1.0], &[2.0, 1.0]);
        let (f, trace) = cp_decompose_traced(&t, &DecompSettings::new(Method::Cp, 1)).unwrap();
        let err = f.reconstruct().unwrap().distance(&t).unwrap() / t.frobenius_norm();
        assert!(err <= 1e-6, "relative error {err}");
        assert!(trace.relative_error() <= 1e-6);
        for m in &f.factors {
            assert!((m.frobenius_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tensor_gives_zero_weights() {
        let t = DenseTensor::zeros(vec![3, 2, 4]).unwrap();
        let f = cp_decompose(&t, &DecompSettings::new(Method::Cp, 3)).unwrap();
        assert!(f.weights.iter().all(|&w| w == 0.0));
        assert!(f.reconstruct().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn error_sequence_non_increasing() {
        let t = random(vec![4, 5, 3], 11);
        let mut s = DecompSettings::new(Method::Cp, 3).with_seed(5);
        s.tolerance = 1e-12;
        let (_, trace) = cp_decompose_traced(&t, &s).unwrap();
        assert_eq!(trace.sweeps, 50);
        for w in trace.errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * trace.input_norm, "{w:?}");
        }
    }

    #[test]
    fn overcomplete_exact_fit_never_loses_ground() {
        let t = outer3(&[1.0, 2.0], &[0.5, -1.0, 3.0], &[1.0, 1.5])
            .axpby(1.0, &outer3(&[-1.0, 0.5], &[2.0, 1.0, 0.0], &[0.3, -2.0]), 1.0)
            .unwrap();
        for seed in 0..40 {
            let s = DecompSettings { tolerance: 1e-15, ..DecompSettings::new(Method::Cp, 3).with_seed(seed) };
            let (f, trace) = cp_decompose_traced(&t, &s).unwrap();
            assert!(trace.errors.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {:?}", trace.errors);
            let measured = f.reconstruct().unwrap().distance(&t).unwrap();
            assert_eq!(measured, trace.final_error(), "seed {seed}");
        }
    }

    #[test]
    fn higher_rank_fits_better() {
        let t = random(vec![4, 4, 4], 3);
        let e = |r| {
            let (_, tr) = cp_decompose_traced(&t, &DecompSettings::new(Method::Cp, r).with_seed(1)).unwrap();
            tr.final_error()
        };
        assert!(e(4) <= e(2));
    }

    #[test]
    fn deterministic_under_seed() {
        let t = random(vec![3, 4, 5], 8);
        let s = DecompSettings::new(Method::Cp, 2).with_seed(99);
        assert_eq!(cp_decompose(&t, &s).unwrap(), cp_decompose(&t, &s).unwrap());
    }

    #[test]
    fn init_extends_across_ranks() {
        let a = init_factors(&[3, 4], 2, 5);
        let b = init_factors(&[3, 4], 3, 5);
        for (fa, fb) in a.iter().zip(&b) {
            for i in 0..fa.rows() {
                assert_eq!(fa.row(i), &fb.row(i)[..2]);
            }
        }
    }

    #[test]
    fn wrong_method_rejected() {
        let t = random(vec![2, 2], 1);
        assert!(cp_decompose(&t, &DecompSettings::new(Method::Tt, 1)).is_err());
    }
}
