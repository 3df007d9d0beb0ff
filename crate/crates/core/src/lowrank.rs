//! Dense small-matrix arithmetic and the low-rank adapter representation.
//!
//! Everything here is plain `f64` in row-major order. The simulator never
//! exceeds a few dozen rows or columns, so there is no sparse or blocked
//! storage, and all values are immutable after construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| self.data[r * self.cols..(r + 1) * self.cols].to_vec())
            .collect()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "matvec: {}x{} against vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_map(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_map(rhs, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn same_shape(&self, rhs: &Matrix) -> bool {
        self.rows == rhs.rows && self.cols == rhs.cols
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{context}: entry {bad}")));
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

/// One task-specific low-rank factor pair: the update `B * A` of a frozen
/// base weight, with `B` of shape `d x r` and `A` of shape `r x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    b: Matrix,
    a: Matrix,
}

impl LowRankAdapter {
    /// Builds a trainable adapter; the rank must not exceed `min(d, k)`.
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::ShapeMismatch(format!(
                "B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let rank = b.cols();
        if rank == 0 {
            return Err(Error::ShapeMismatch("adapter rank must be at least 1".into()));
        }
        if rank > b.rows().min(a.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "rank {rank} exceeds min(d, k) = {}",
                b.rows().min(a.cols())
            )));
        }
        Ok(Self { b, a })
    }

    /// Stacked adapters (from [`concat_adapters`]) may carry a rank above
    /// `min(d, k)`; only factor compatibility is enforced here.
    pub fn from_stacked(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self { b, a })
    }

    pub fn zeros(d: usize, k: usize, rank: usize) -> Result<Self> {
        Self::new(Matrix::zeros(d, rank), Matrix::zeros(rank, k))
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `d`.
    pub fn output_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }

    /// The dense update `B * A` of shape `d x k`.
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("factor shapes are checked at construction")
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.b.same_shape(&other.b) && self.a.same_shape(&other.a)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { b: self.b.map(&f), a: self.a.map(&f) }
    }

    /// Applies `f` elementwise to the `B` factors and to the `A` factors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        Ok(Self { b: self.b.zip_map(&other.b, &f)?, a: self.a.zip_map(&other.a, &f)? })
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        self.b.assert_finite(context)?;
        self.a.assert_finite(context)
    }
}

/// Cosine similarity of two equal-length vectors, clamped to `[-1, 1]`.
///
/// Zero-norm inputs are rejected rather than mapped to 0: a silent zero would
/// poison every threshold comparison built on top of this.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::DegenerateInput("cosine of empty vectors".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu <= 0.0 || nv <= 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Stacks adapters along the rank dimension, preserving input order:
/// `B` factors side by side into `d x (sum r_i)`, `A` factors on top of each
/// other into `(sum r_i) x k`.
pub fn concat_adapters(adapters: &[LowRankAdapter]) -> Result<LowRankAdapter> {
    let first = adapters
        .first()
        .ok_or_else(|| Error::DegenerateInput("concat of zero adapters".into()))?;
    let (d, k) = (first.output_dim(), first.input_dim());
    if adapters.iter().any(|a| a.output_dim() != d || a.input_dim() != k) {
        return Err(Error::ShapeMismatch("adapters disagree on d or k".into()));
    }
    let total_rank: usize = adapters.iter().map(LowRankAdapter::rank).sum();

    let mut b = Matrix::zeros(d, total_rank);
    let mut col = 0;
    for adapter in adapters {
        for i in 0..d {
            for j in 0..adapter.rank() {
                b.set(i, col + j, adapter.b().get(i, j));
            }
        }
        col += adapter.rank();
    }

    let a_data: Vec<f64> = adapters.iter().flat_map(|ad| ad.a().data().iter().copied()).collect();
    let a = Matrix::new(total_rank, k, a_data)?;

    LowRankAdapter::from_stacked(b, a)
}
