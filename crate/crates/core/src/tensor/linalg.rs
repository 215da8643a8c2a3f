use super::Matrix;
use crate::error::{Error, Result};

/// `out += a (m x k) * b (k x n)`, all row-major. `out` must be zeroed by the
/// caller when a plain product is wanted.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let src = &b[p * n..(p + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += aip * s;
            }
        }
    }
}

/// Column-wise Kronecker product. Row `i * b.rows + j` of column `r` holds
/// `a[i, r] * b[j, r]`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::invalid(format!("khatri-rao needs equal column counts, got {} and {}", a.cols(), b.cols())));
    }
    let r = a.cols();
    let mut data = Vec::with_capacity(a.rows() * b.rows() * r);
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            data.extend(ai.iter().zip(b.row(j)).map(|(x, y)| x * y));
        }
    }
    Matrix::new(a.rows() * b.rows(), r, data)
}

/// Solves `X * s = rhs` for `X` where `s` is symmetric positive definite,
/// via Cholesky. Used for the CP normal equations, where `rhs` is `I_n x R`.
pub fn solve_spd(s: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    if s.cols() != n || rhs.cols() != n {
        return Err(Error::invalid(format!(
            "solve_spd: {}x{} system with {}x{} right-hand side",
            s.rows(),
            s.cols(),
            rhs.rows(),
            rhs.cols()
        )));
    }
    // Lower-triangular L with s = L L^T.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::numerical(format!("matrix not positive definite at pivot {i} ({sum:e})")));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // X s = rhs  <=>  s X^T = rhs^T, since s is symmetric; solve row by row.
    let mut out = rhs.clone();
    let mut y = vec![0.0; n];
    for row in 0..rhs.rows() {
        let b = rhs.row(row);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        let x = &mut out.data_mut()[row * n..(row + 1) * n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * x[k];
            }
            x[i] = sum / l[i * n + i];
        }
    }
    Ok(out)
}
