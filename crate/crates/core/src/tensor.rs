//! Dense row-major tensors and the small set of linear-algebra primitives
//! the rest of the crate is built on.
//!
//! Everything runs in 64-bit floats. Serialization may narrow to 32 bits,
//! but that is a storage concern handled by the container codec, not here.

use crate::error::{MqError, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and matching data buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MqError::shape(
                "tensor construction: shape product != data length",
                &shape,
                &[data.len()],
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    /// Identity matrix of order `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(MqError::InvalidConfig("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(vec![rows.len(), ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix.
    pub fn nrows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as a matrix.
    pub fn ncols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[i * self.ncols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(self.is_matrix());
        let n = self.ncols();
        self.data[i * n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.ncols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.ncols();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.nrows(), self.ncols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Scale every column `j` by `scale[j]` (matrix view).
    pub fn scale_cols(&mut self, scale: &[f64]) {
        let n = self.ncols();
        assert_eq!(scale.len(), n);
        for row in self.data.chunks_mut(n) {
            for (v, s) in row.iter_mut().zip(scale) {
                *v *= s;
            }
        }
    }

    /// Scale every row `i` by `scale[i]` (matrix view).
    pub fn scale_rows(&mut self, scale: &[f64]) {
        let n = self.ncols();
        assert_eq!(scale.len(), self.nrows());
        for (row, s) in self.data.chunks_mut(n).zip(scale) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Standard matrix product with 64-bit accumulation.
///
/// Accumulation order is fixed (k innermost, ascending) so results are
/// bit-reproducible across runs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.ncols() != b.nrows() {
        return Err(MqError::shape("matmul inner dimensions", a.shape(), b.shape()));
    }
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(p);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// Per-column summary used throughout calibration and reporting.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Unbiased variance (n-1 denominator).
    pub variance: f64,
    pub absmax: f64,
    pub min: f64,
    pub max: f64,
    /// Values at the quantile points of [`QUANTILE_POINTS`].
    pub quantiles: Vec<f64>,
}

/// Quantile points reported by [`channel_stats`].
pub const QUANTILE_POINTS: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 0.99];

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-column mean, unbiased variance, absmax, and quantiles of a 2-D tensor.
///
/// Requires at least two rows; the variance denominator is `n - 1`.
pub fn channel_stats(x: &Tensor) -> Result<Vec<ColumnStats>> {
    if !x.is_matrix() {
        return Err(MqError::shape("channel_stats expects a matrix", x.shape(), &[]));
    }
    let (n, m) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(MqError::TooFewRows { what: "channel_stats (variance undefined)", rows: n });
    }
    let mut out = Vec::with_capacity(m);
    let mut col = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            col[i] = x.at(i, j);
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let variance = ss / (n - 1) as f64;
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantiles = QUANTILE_POINTS.iter().map(|&q| quantile_sorted(&sorted, q)).collect();
        out.push(ColumnStats {
            mean,
            variance,
            absmax: min.abs().max(max.abs()),
            min,
            max,
            quantiles,
        });
    }
    Ok(out)
}

/// max/min ratio of a positive vector, guarding the denominator.
pub fn spread_ratio(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
