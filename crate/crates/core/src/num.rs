//! Dense row-major f64 matrices and the handful of numeric helpers the
//! models need. All math is plain loops over contiguous slices; iteration
//! order is fixed so results are bit-stable.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Mat { rows, cols, data }
    }

    /// Entries drawn i.i.d. from Normal(0, std^2).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Mat::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// self += alpha * other (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// C = A · Bᵀ where A is n×d and B is m×d. The inner loop runs over
    /// contiguous rows of both operands.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let orow = out.row_mut(i);
            for (j, oj) in orow.iter_mut().enumerate() {
                *oj = dot(a, other.row(j));
            }
        }
        out
    }

    /// C = A · B where A is n×d and B is d×m.
    pub fn matmul_nn(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul_nn inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &ak) in a.iter().enumerate() {
                if ak == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += ak * b;
                }
            }
        }
        out
    }

    /// out += Aᵀ · B where A is n×d and B is n×m; result d×m. Used for
    /// weight gradients (activationsᵀ · upstream).
    pub fn add_tn(&self, other: &Mat, out: &mut Mat) {
        assert_eq!(self.rows, other.rows, "add_tn outer dims");
        assert_eq!(out.rows, self.cols);
        assert_eq!(out.cols, other.cols);
        for n in 0..self.rows {
            let a = self.row(n);
            let b = other.row(n);
            for (k, &ak) in a.iter().enumerate() {
                if ak == 0.0 {
                    continue;
                }
                let orow = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (o, &bv) in orow.iter_mut().zip(b.iter()) {
                    *o += ak * bv;
                }
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Little-endian f32 serialization, row-major.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != rows * cols * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Some(Mat { rows, cols, data })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// In-place softmax with max subtraction. Entries equal to `f64::NEG_INFINITY`
/// get probability zero; if every entry is -inf the row becomes all zeros.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// log(sum(exp(row))) with max subtraction; -inf entries are skipped.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
