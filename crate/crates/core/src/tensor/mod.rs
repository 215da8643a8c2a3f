//! Dense real tensors and the linear algebra the decompositions are built on.
//!
//! Storage is row-major throughout: the last index varies fastest.
//!
//! # Unfolding convention
//!
//! The mode-`n` unfolding of a tensor with shape `[I_0, ..., I_{d-1}]` is the
//! `I_n x (prod_{k != n} I_k)` matrix whose row index is `i_n`. Its column
//! index is the row-major offset of the remaining indices taken in increasing
//! mode order, i.e. the last remaining mode varies fastest:
//!
//! ```text
//! col = sum_{k != n} i_k * prod_{m > k, m != n} I_m
//! ```
//!
//! For `n = 0` this is a plain reshape of the flat buffer. [`khatri_rao`]
//! uses the matching ordering (left operand slowest), so
//! `unfold(X, n) = A_n * diag(w) * KR(A_k for k != n, increasing)^T` holds for a
//! CP model.

mod io;
mod linalg;
mod svd;

pub use io::{read_tdf1, read_tdf1_from, write_tdf1, write_tdf1_to, DTYPE_F64, TDF1_MAGIC};
pub use linalg::{khatri_rao, solve_spd};
pub use svd::{svd, Svd, SVD_MAX_SWEEPS, SVD_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// N-dimensional `f64` array with an explicit shape, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = checked_len(&shape)?;
        if data.len() != len {
            return Err(Error::invalid(format!("shape {:?} needs {} elements, got {}", shape, len, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = checked_len(&shape)?;
        Ok(Self { shape, data: vec![0.0; len] })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = checked_len(&shape)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, &shape);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f64, other: &DenseTensor, b: f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn distance(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    }

    fn check_same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Sub-tensor at position `i` along mode 0.
    pub fn slice0(&self, i: usize) -> Result<Self> {
        if self.order() < 2 || i >= self.shape[0] {
            return Err(Error::invalid(format!("slice {i} out of range for shape {:?}", self.shape)));
        }
        let stride: usize = self.shape[1..].iter().product();
        Ok(Self { shape: self.shape[1..].to_vec(), data: self.data[i * stride..(i + 1) * stride].to_vec() })
    }

    /// Stacks equally shaped tensors along a new leading mode.
    pub fn stack(parts: &[DenseTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.check_same_shape(p)?;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }
}

/// Frobenius norm of a flat buffer.
pub fn frobenius(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.frobenius_norm()
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor order must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))
}

/// Advances a row-major multi-index by one position.
fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        linalg::gemm(&self.data, &other.data, &mut out, self.rows, self.cols, other.cols);
        Ok(Self { rows: self.rows, cols: other.cols, data: out })
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply ({}x{})^T by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, p) = (self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let dst = &mut out[i * p..(i + 1) * p];
                for (d, &bkj) in dst.iter_mut().zip(b) {
                    *d += aik * bkj;
                }
            }
        }
        Ok(Self { rows: n, cols: p, data: out })
    }

    /// Keeps the first `k` columns.
    pub fn leading_columns(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.cols {
            return Err(Error::invalid(format!("cannot take {k} of {} columns", self.cols)));
        }
        Ok(Self::from_fn(self.rows, k, |i, j| self.get(i, j)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.data)
    }

    pub fn map_elements(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max-abs deviation of `self^T self` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.t_matmul(self).expect("square gram");
        g.max_abs_diff(&Matrix::identity(self.cols))
    }

    pub fn into_tensor(self) -> DenseTensor {
        DenseTensor { shape: vec![self.rows, self.cols], data: self.data }
    }
}

fn check_mode(t: &DenseTensor, mode: usize) -> Result<()> {
    if mode >= t.order() {
        return Err(Error::invalid(format!("mode {mode} out of range for order-{} tensor", t.order())));
    }
    Ok(())
}

/// Splits `shape` around `mode` into (outer, extent, inner) strides.
fn mode_split(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer = shape[..mode].iter().product();
    let inner = shape[mode + 1..].iter().product();
    (outer, shape[mode], inner)
}

/// Mode-`mode` matricization; see the module docs for the column ordering.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    check_mode(t, mode)?;
    let (outer, n, inner) = mode_split(t.shape(), mode);
    let cols = outer * inner;
    let mut out = vec![0.0; n * cols];
    let src = t.data();
    for o in 0..outer {
        for i in 0..n {
            let s = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
            out[i * cols + o * inner..i * cols + (o + 1) * inner].copy_from_slice(s);
        }
    }
    Matrix::new(n, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    let len = checked_len(shape)?;
    if mode >= shape.len() {
        return Err(Error::invalid(format!("mode {mode} out of range for shape {shape:?}")));
    }
    let (outer, n, inner) = mode_split(shape, mode);
    if m.rows() != n || m.cols() != outer * inner {
        return Err(Error::invalid(format!(
            "{}x{} matrix cannot fold along mode {mode} into {shape:?}",
            m.rows(),
            m.cols()
        )));
    }
    let cols = m.cols();
    let mut out = vec![0.0; len];
    let src = m.data();
    for o in 0..outer {
        for i in 0..n {
            out[(o * n + i) * inner..(o * n + i + 1) * inner]
                .copy_from_slice(&src[i * cols + o * inner..i * cols + (o + 1) * inner]);
        }
    }
    DenseTensor::new(shape.to_vec(), out)
}

/// `t x_mode m`: contracts mode `mode` of `t` with the columns of `m`.
pub fn mode_n_product(t: &DenseTensor, m: &Matrix, mode: usize) -> Result<DenseTensor> {
    check_mode(t, mode)?;
    let (outer, n, inner) = mode_split(t.shape(), mode);
    if m.cols() != n {
        return Err(Error::invalid(format!(
            "{}x{} matrix does not match extent {n} of mode {mode}",
            m.rows(),
            m.cols()
        )));
    }
    let r = m.rows();
    let mut shape = t.shape().to_vec();
    shape[mode] = r;
    let mut out = vec![0.0; outer * r * inner];
    let src = t.data();
    // Works block by block on the (n x inner) slabs so no unfold copy is needed.
    for o in 0..outer {
        let slab = &src[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * r * inner..(o + 1) * r * inner];
        linalg::gemm(m.data(), slab, dst, r, n, inner);
    }
    DenseTensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: Vec<usize>) -> DenseTensor {
        let n: usize = shape.iter().product();
        DenseTensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(DenseTensor::new(vec![], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn offset_matches_row_major() {
        let t = iota(vec![2, 3, 4]);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
        assert_eq!(t.get(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn unfold_shapes() {
        let t = iota(vec![2, 3, 4]);
        let m = unfold(&t, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 12));
        assert_eq!(m.data(), t.data());
        let v = iota(vec![5]);
        let m = unfold(&v, 0).unwrap();
        assert_eq!((m.rows(), m.cols()), (5, 1));
        assert_eq!(m.data(), v.data());
        assert!(unfold(&t, 3).is_err());
    }

    #[test]
    fn unfold_cube_matches_index_loop() {
        let t = iota(vec![2, 2, 2]);
        let m = unfold(&t, 1).unwrap();
        // Remaining modes (0, 2) with mode 2 fastest.
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let col = i * 2 + k;
                    assert_eq!(m.get(j, col), t.get(&[i, j, k]));
                }
            }
        }
        assert_eq!(fold(&m, 1, &[2, 2, 2]).unwrap(), t);
    }

    #[test]
    fn fold_vector_and_errors() {
        let m = Matrix::new(6, 1, (0..6).map(|v| v as f64).collect()).unwrap();
        let t = fold(&m, 0, &[6]).unwrap();
        assert_eq!(t.shape(), &[6]);
        assert_eq!(t.data(), m.data());
        assert!(fold(&m, 0, &[3, 2]).is_err());
        assert!(fold(&m, 2, &[6]).is_err());
    }

    #[test]
    fn mode_product_identity_and_matrix_case() {
        let t = iota(vec![2, 3, 4]);
        assert_eq!(mode_n_product(&t, &Matrix::identity(3), 1).unwrap(), t);

        let t2 = iota(vec![2, 3]);
        let a = Matrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let out = mode_n_product(&t2, &a, 0).unwrap();
        assert_eq!(out.shape(), &[4, 3]);
        let as_matrix = Matrix::new(2, 3, t2.data().to_vec()).unwrap();
        assert_eq!(out.data(), a.matmul(&as_matrix).unwrap().data());
        assert!(mode_n_product(&t2, &a, 1).is_err());
    }

    #[test]
    fn khatri_rao_examples() {
        let a = Matrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Matrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(khatri_rao(&a, &b).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);

        let r1 = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let r2 = Matrix::new(1, 3, vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(khatri_rao(&r1, &r2).unwrap().data(), &[4.0, 10.0, 18.0]);

        let i2 = Matrix::identity(2);
        let kr = khatri_rao(&i2, &i2).unwrap();
        assert_eq!((kr.rows(), kr.cols()), (4, 2));
        assert_eq!(kr.column(0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kr.column(1), vec![0.0, 0.0, 0.0, 1.0]);

        assert!(khatri_rao(&a, &r1).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(DenseTensor::zeros(vec![3, 3]).unwrap().frobenius_norm(), 0.0);
        let mut hot = DenseTensor::zeros(vec![2, 5]).unwrap();
        hot.set(&[1, 3], 1.0);
        assert_eq!(frobenius_norm(&hot), 1.0);
        let twos = DenseTensor::new(vec![2, 2, 2], vec![2.0; 8]).unwrap();
        assert_eq!(twos.frobenius_norm(), 32f64.sqrt());
    }

    #[test]
    fn stack_and_slice() {
        let a = iota(vec![2, 3]);
        let b = a.map(|v| -v);
        let s = DenseTensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.slice0(1).unwrap(), b);
        assert_eq!(s.slice0(0).unwrap(), a);
    }
}
