//! Dense complex matrices for channel algebra.
//!
//! Entries are `num_complex::Complex64`, row-major, so the in-memory layout
//! is interleaved (re, im) double pairs.

use crate::error::{TensorError, TensorResult};
use num_complex::Complex64;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> TensorResult<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::InvalidShape {
                op: "ComplexMatrix::new",
                shape: vec![rows, cols],
                reason: format!("data length {} != rows*cols", data.len()),
            });
        }
        if !data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "ComplexMatrix::new",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, other: &ComplexMatrix) -> TensorResult<ComplexMatrix> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "ComplexMatrix::matmul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![Complex64::new(0.0, 0.0); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = self.data[i * k + p];
                if av.re == 0.0 && av.im == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        Ok(ComplexMatrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Conjugate (Hermitian) transpose.
    pub fn hermitian(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn add(&self, other: &ComplexMatrix) -> TensorResult<ComplexMatrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ComplexMatrix::add",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &ComplexMatrix) -> TensorResult<ComplexMatrix> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ComplexMatrix::sub",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, c: Complex64) -> ComplexMatrix {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn fro_norm_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn fro_norm(&self) -> f64 {
        self.fro_norm_sq().sqrt()
    }

    /// Max absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// ||A*A^H - I||_max, the unitarity defect.
    pub fn unitarity_defect(&self) -> f64 {
        let prod = self.matmul(&self.hermitian()).expect("square product");
        prod.max_abs_diff(&ComplexMatrix::identity(self.rows))
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Unitary DFT matrix `W[k,l] = exp(-j*2*pi*k*l/n)/sqrt(n)`.
pub fn dft_matrix(n: usize) -> ComplexMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    ComplexMatrix::from_fn(n, n, |k, l| {
        let phase = -2.0 * std::f64::consts::PI * (k * l) as f64 / n as f64;
        Complex64::from_polar(scale, phase)
    })
}
