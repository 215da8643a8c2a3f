//! Forward and backward rules for the encoder's building blocks. Activations
//! are `tokens x width` row-major matrices.

use crate::tensor::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let (t, w) = (x.rows(), x.cols());
    let mut normalized = Matrix::zeros(t, w);
    let mut out = Matrix::zeros(t, w);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..w {
            let n = (row[j] - mean) * is;
            normalized.set(i, j, n);
            out.set(i, j, gamma[j] * n + beta[j]);
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(dy: &Matrix, gamma: &[f64], cache: &LayerNormCache) -> Matrix {
    let (t, w) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(t, w);
    for i in 0..t {
        let xhat = cache.normalized.row(i);
        let dxhat: Vec<f64> = dy.row(i).iter().zip(gamma).map(|(d, g)| d * g).collect();
        let mean_d = dxhat.iter().sum::<f64>() / w as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / w as f64;
        for j in 0..w {
            dx.set(i, j, cache.inv_std[i] * (dxhat[j] - mean_d - xhat[j] * mean_dx));
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `x * w + b` (row-vector convention).
pub(crate) fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = x.matmul(w).expect("affine shapes");
    let cols = out.cols();
    for row in out.data_mut().chunks_exact_mut(cols) {
        for (o, bj) in row.iter_mut().zip(b) {
            *o += bj;
        }
    }
    out
}

/// `dy * w^T`.
pub(crate) fn affine_backward_input(dy: &Matrix, w: &Matrix) -> Matrix {
    dy.matmul(&w.transpose()).expect("affine backward shapes")
}

pub(crate) struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// One `tokens x tokens` probability matrix per head.
    pub probs: Vec<Matrix>,
}

fn head_slice(m: &Matrix, h: usize, dh: usize) -> Matrix {
    Matrix::from_fn(m.rows(), dh, |i, j| m.get(i, h * dh + j))
}

fn add_head_slice(dst: &mut Matrix, src: &Matrix, h: usize, dh: usize) {
    for i in 0..src.rows() {
        for j in 0..dh {
            let v = dst.get(i, h * dh + j) + src.get(i, j);
            dst.set(i, h * dh + j, v);
        }
    }
}

pub(crate) fn softmax_rows(s: &mut Matrix) {
    let cols = s.cols();
    for row in s.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Multi-head self-attention core: returns the concatenated head outputs
/// (before the output projection).
pub(crate) fn attention(q: Matrix, k: Matrix, v: Matrix, heads: usize) -> (Matrix, AttentionCache) {
    let (t, w) = (q.rows(), q.cols());
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(t, w);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut s = qh.matmul(&kh.transpose()).expect("qk");
        s.data_mut().iter_mut().for_each(|x| *x *= scale);
        softmax_rows(&mut s);
        let oh = s.matmul(&vh).expect("av");
        add_head_slice(&mut out, &oh, h, dh);
        probs.push(s);
    }
    (out, AttentionCache { q, k, v, probs })
}

/// Gradients with respect to `q`, `k`, `v` given the gradient of the
/// concatenated head outputs.
pub(crate) fn attention_backward(d_out: &Matrix, cache: &AttentionCache, heads: usize) -> (Matrix, Matrix, Matrix) {
    let (t, w) = (d_out.rows(), d_out.cols());
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(t, w);
    let mut dk = Matrix::zeros(t, w);
    let mut dv = Matrix::zeros(t, w);
    for h in 0..heads {
        let a = &cache.probs[h];
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let doh = head_slice(d_out, h, dh);

        add_head_slice(&mut dv, &a.t_matmul(&doh).expect("dv"), h, dh);
        let da = doh.matmul(&vh.transpose()).expect("da");
        let mut ds = Matrix::zeros(t, t);
        for i in 0..t {
            let dot: f64 = (0..t).map(|j| da.get(i, j) * a.get(i, j)).sum();
            for j in 0..t {
                ds.set(i, j, a.get(i, j) * (da.get(i, j) - dot) * scale);
            }
        }
        add_head_slice(&mut dq, &ds.matmul(&kh).expect("dq"), h, dh);
        add_head_slice(&mut dk, &ds.t_matmul(&qh).expect("dk"), h, dh);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Matrix::from_fn(3, 8, |i, j| (i * 8 + j) as f64 * 0.3 - (j % 3) as f64);
        let (y, _) = layer_norm(&x, &[1.0; 8], &[0.0; 8]);
        for i in 0..3 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = Matrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 3.0);
        softmax_rows(&mut s);
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
