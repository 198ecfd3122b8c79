//! Dense row-major matrix with the handful of kernels the simulator needs.

use crate::error::{ensure_len, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `out = self · x + bias`.
    pub fn affine_into(&self, x: &[T], bias: &[T], out: &mut [T]) -> Result<()> {
        ensure_len("matrix-vector input", self.cols, x.len())?;
        ensure_len("bias", self.rows, bias.len())?;
        ensure_len("matrix-vector output", self.rows, out.len())?;
        for ((o, row), b) in out.iter_mut().zip(self.data.chunks_exact(self.cols)).zip(bias) {
            let mut acc = T::zero();
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            *o = acc + *b;
        }
        Ok(())
    }

    /// `out = bias + Σ_{j ∈ active} self[:, j]`, i.e. the product with a
    /// binary vector given by its set indices.
    pub fn affine_binary_into(&self, active: &[usize], bias: &[T], out: &mut [T]) -> Result<()> {
        ensure_len("bias", self.rows, bias.len())?;
        ensure_len("matrix-vector output", self.rows, out.len())?;
        if let Some(&j) = active.iter().find(|&&j| j >= self.cols) {
            return Err(crate::Error::DimensionMismatch {
                context: "spike index",
                expected: self.cols,
                actual: j + 1,
            });
        }
        for ((o, row), b) in out.iter_mut().zip(self.data.chunks_exact(self.cols)).zip(bias) {
            let mut acc = T::zero();
            for &j in active {
                acc += row[j];
            }
            *o = acc + *b;
        }
        Ok(())
    }

    /// `out = self · x`.
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = T::zero();
            for (w, xi) in row.iter().zip(x) {
                acc += *w * *xi;
            }
            *o = acc;
        }
    }

    /// `out = selfᵀ · x`.
    pub fn matvec_transposed_into(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            if xi.is_zero() {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += *w * *xi;
            }
        }
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>> {
        ensure_len("matmul inner dimension", self.cols, rhs.rows)?;
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(rhs.row(k)) {
                    *d += a * *b;
                }
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: T, u: &[T], v: &[T]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let s = scale * *ui;
            if s.is_zero() {
                continue;
            }
            for (r, vj) in row.iter_mut().zip(v) {
                *r += s * *vj;
            }
        }
    }

    /// `self[:, j] += u` for every `j` in `cols`: the outer product of `u`
    /// with a binary vector.
    pub fn add_to_columns(&mut self, u: &[T], cols: &[usize]) {
        debug_assert_eq!(u.len(), self.rows);
        for (ui, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if ui.is_zero() {
                continue;
            }
            for &j in cols {
                row[j] += *ui;
            }
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: T, other: &Matrix<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    /// Bitwise digest of the contents, for detecting any mutation.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bit patterns.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            for byte in x.as_f64().to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_affine(w: &Matrix<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum::<f64>() + b[i])
            .collect()
    }

    #[test]
    fn binary_affine_matches_dense() {
        let w = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.5 - 2.0);
        let b = [0.1, -0.2, 0.3];
        let x = [1.0, 0.0, 1.0, 1.0, 0.0];
        let mut dense = [0.0; 3];
        let mut sparse = [0.0; 3];
        w.affine_into(&x, &b, &mut dense).unwrap();
        w.affine_binary_into(&[0, 2, 3], &b, &mut sparse).unwrap();
        assert_eq!(dense.to_vec(), naive_affine(&w, &x, &b));
        assert_eq!(dense, sparse);
    }

    #[test]
    fn transposed_matvec_and_matmul() {
        let a = Matrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64);
        let mut out = [0.0; 3];
        a.matvec_transposed_into(&[1.0, -1.0], &mut out);
        assert_eq!(out, [-1.0, -1.0, -1.0]);
        let p = a.matmul(&a.transpose()).unwrap();
        assert_eq!(p.shape(), (2, 2));
        assert_eq!(p.get(0, 0), 0.0 + 4.0 + 16.0);
        assert_eq!(p.get(0, 1), 0.0 * 1.0 + 2.0 * 3.0 + 4.0 * 5.0);
    }

    #[test]
    fn shape_errors() {
        let w = Matrix::<f64>::zeros(2, 3);
        let mut out = [0.0; 2];
        assert!(w.affine_into(&[1.0, 2.0], &[0.0, 0.0], &mut out).is_err());
        assert!(w.affine_binary_into(&[3], &[0.0, 0.0], &mut out).is_err());
        assert!(w.matmul(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn outer_products() {
        let mut m = Matrix::<f64>::zeros(2, 3);
        m.add_outer(2.0, &[1.0, -1.0], &[1.0, 0.0, 3.0]);
        assert_eq!(m.as_slice(), &[2.0, 0.0, 6.0, -2.0, 0.0, -6.0]);
        let mut c = Matrix::<f64>::zeros(2, 3);
        c.add_to_columns(&[1.0, 2.0], &[0, 2]);
        let mut d = Matrix::<f64>::zeros(2, 3);
        d.add_outer(1.0, &[1.0, 2.0], &[1.0, 0.0, 1.0]);
        assert_eq!(c, d);
    }
}
