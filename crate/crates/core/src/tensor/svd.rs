//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For an `m x n` input with `m >= n` the columns of a working copy are
//! rotated pairwise until every pair is orthogonal to within
//! [`SVD_TOLERANCE`] relative to their norms. Column norms are then the
//! singular values, the normalized columns are `U`, and the accumulated
//! rotations are `V`. Wide inputs are handled through the transpose.

use super::Matrix;
use crate::error::{Error, Result};

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOLERANCE: f64 = 1e-12;

/// `m = u * diag(s) * v^T`, with `u` `m x k`, `v` `n x k`, `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u[:, ..k] * diag(s[..k]) * v[:, ..k]^T`.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let k = k.min(self.s.len());
        let (m, n) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(m, n, |i, j| (0..k).map(|r| self.u.get(i, r) * self.s[r] * self.v.get(j, r)).sum())
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(Svd { u, s, v })
    } else {
        let (v, s, u) = jacobi_tall(&m.transpose())?;
        Ok(Svd { u, s, v })
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = (a.rows(), a.cols());
    // Column-major working copies so that column operations are contiguous.
    let mut w = a.transpose().into_data();
    let mut v = Matrix::identity(n).into_data();
    let mut norms: Vec<f64> = (0..n).map(|j| sq_norm(&w[j * m..(j + 1) * m])).collect();

    let mut converged = n < 2;
    for _sweep in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (cp, cq) = two_columns(&mut w, m, p, q);
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                norms[p] = sq_norm(cp);
                norms[q] = sq_norm(cq);
                let (vp, vq) = two_columns(&mut v, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "jacobi svd of {m}x{n} matrix did not converge in {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sv: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| sv[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let negligible = smax * f64::EPSILON * m as f64;

    // Columns of U, column-major, completed to an orthonormal set where the
    // singular value carries no direction.
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if s[k] > negligible && s[k] > 0.0 {
            let col = &w[j * m..(j + 1) * m];
            ucols.push(col.iter().map(|x| x / s[k]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            deficient.push(k);
        }
    }
    complete_basis(&mut ucols, &deficient, m);

    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    let vmat = Matrix::from_fn(n, n, |i, k| v[order[k] * n + i]);
    Ok((u, s, vmat))
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn two_columns(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Replaces the listed columns with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], deficient: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &k in deficient {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt against all current non-deficient or
            // already completed columns.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (deficient.contains(&j) && sq_norm(c) == 0.0) {
                        continue;
                    }
                    let d: f64 = e.iter().zip(c).map(|(a, b)| a * b).sum();
                    for (a, b) in e.iter_mut().zip(c) {
                        *a -= d * b;
                    }
                }
            }
            let nrm = sq_norm(&e).sqrt();
            if nrm > 1e-8 {
                cols[k] = e.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}
