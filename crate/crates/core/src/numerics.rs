//! Dense complex matrix algebra for channels and beamformers.
//!
//! Matrices are stored row-major as `(re, im)` pairs. Channels live as K-by-N
//! (users as rows), beamformers as N-by-K (antennas as rows); every other
//! module adapts to this orientation. The solver is a complex Cholesky
//! factorization, which is all the MMSE initializer and the WMMSE transmit
//! update need.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexMatrix<T> {
    /// Builds a matrix from row-major entries; the length must be rows*cols.
    pub fn new(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension {
                op: "ComplexMatrix::new",
                detail: format!("dimensions must be positive, got {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "ComplexMatrix::new",
                detail: format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix { rows, cols, data: vec![Complex::new(T::zero(), T::zero()); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ComplexMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex<T>) {
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a slice of length `cols`.
    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column `j` collected into a vector.
    pub fn col(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Standard complex matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{}x{} times {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![Complex::new(T::zero(), T::zero()); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(ComplexMatrix { rows: m, cols: n, data: out })
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    /// Plain transpose (no conjugation).
    pub fn transpose(&self) -> Self {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Entrywise conjugate.
    pub fn conj(&self) -> Self {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|c| c.conj()).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        rhs: &Self,
        op: &'static str,
        f: impl Fn(Complex<T>, Complex<T>) -> Complex<T>,
    ) -> Result<Self> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Dimension {
                op,
                detail: format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        Ok(ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Real scalar multiple.
    pub fn scale(&self, s: T) -> Self {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&c| c * s).collect(),
        }
    }

    /// Scales row `i` by the real factor `s[i]`.
    pub fn scale_rows(&self, s: &[T]) -> Result<Self> {
        if s.len() != self.rows {
            return Err(Error::Dimension {
                op: "scale_rows",
                detail: format!("{} factors for {} rows", s.len(), self.rows),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] = out.data[i * self.cols + j] * s[i];
            }
        }
        Ok(out)
    }

    /// Frobenius norm: sqrt of the sum of squared moduli.
    pub fn frob_norm(&self) -> T {
        self.frob_norm_sq().sqrt()
    }

    /// Squared Frobenius norm.
    pub fn frob_norm_sq(&self) -> T {
        let mut acc = T::zero();
        for c in &self.data {
            acc = acc + c.re * c.re + c.im * c.im;
        }
        acc
    }

    /// Solves `self * X = b` for Hermitian positive definite `self` via Cholesky.
    ///
    /// Fails with a singularity error when a pivot is not strictly positive.
    pub fn solve_hpd(&self, b: &Self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Dimension {
                op: "solve_hpd",
                detail: format!("matrix must be square, got {}x{}", self.rows, self.cols),
            });
        }
        if b.rows != self.rows {
            return Err(Error::Dimension {
                op: "solve_hpd",
                detail: format!("rhs has {} rows, expected {}", b.rows, self.rows),
            });
        }
        let n = self.rows;
        // Lower-triangular factor L with self = L * L^H.
        let mut l = vec![Complex::new(T::zero(), T::zero()); n * n];
        for j in 0..n {
            let mut d = self.get(j, j).re;
            for k in 0..j {
                let v = l[j * n + k];
                d = d - (v.re * v.re + v.im * v.im);
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::Singular {
                    detail: format!("pivot {d:?} at column {j} during Cholesky"),
                });
            }
            let dj = d.sqrt();
            l[j * n + j] = Complex::new(dj, T::zero());
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / dj;
            }
        }
        // Forward substitution L y = b, then back substitution L^H x = y.
        let m = b.cols;
        let mut x = b.data.clone();
        for col in 0..m {
            for i in 0..n {
                let mut s = x[i * m + col];
                for k in 0..i {
                    s = s - l[i * n + k] * x[k * m + col];
                }
                x[i * m + col] = s / l[i * n + i].re;
            }
            for i in (0..n).rev() {
                let mut s = x[i * m + col];
                for k in (i + 1)..n {
                    s = s - l[k * n + i].conj() * x[k * m + col];
                }
                x[i * m + col] = s / l[i * n + i].re;
            }
        }
        Ok(ComplexMatrix { rows: n, cols: m, data: x })
    }

    /// Converts entrywise to another scalar type through f64.
    pub fn cast<U: Real>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|c| {
                    Complex::new(
                        real::<U>(c.re.to_f64().unwrap()),
                        real::<U>(c.im.to_f64().unwrap()),
                    )
                })
                .collect(),
        }
    }
}
