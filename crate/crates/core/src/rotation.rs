//! Hadamard matrices, the fast Walsh-Hadamard transform, covariance, and the
//! eigenvector-enhanced rotation that equalizes channel variances.
//!
//! A plain Hadamard rotation evens out channel maxima but leaves channel
//! variances uneven whenever the data covariance has off-diagonal structure.
//! Composing the covariance eigenvectors `K` with a Hadamard matrix `H` into
//! `H_K = K H` makes all rotated channel variances equal to the average
//! eigenvalue on the data that produced `K`.

use crate::eigh::{jacobi_eigh, orthogonality_residual, EighResult};
use crate::error::{MqError, Result};
use crate::tensor::{matmul, Tensor};

/// Paley-construction base of order 12 (sign matrix, rows x cols).
const PALEY_12: [[i8; 12]; 12] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    [-1, 1, 1, -1, 1, 1, 1, -1, -1, -1, 1, -1],
    [-1, -1, 1, 1, -1, 1, 1, 1, -1, -1, -1, 1],
    [-1, 1, -1, 1, 1, -1, 1, 1, 1, -1, -1, -1],
    [-1, -1, 1, -1, 1, 1, -1, 1, 1, 1, -1, -1],
    [-1, -1, -1, 1, -1, 1, 1, -1, 1, 1, 1, -1],
    [-1, -1, -1, -1, 1, -1, 1, 1, -1, 1, 1, 1],
    [-1, 1, -1, -1, -1, 1, -1, 1, 1, -1, 1, 1],
    [-1, 1, 1, -1, -1, -1, 1, -1, 1, 1, -1, 1],
    [-1, 1, 1, 1, -1, -1, -1, 1, -1, 1, 1, -1],
    [-1, -1, 1, 1, 1, -1, -1, -1, 1, -1, 1, 1],
    [-1, 1, -1, 1, 1, 1, -1, -1, -1, 1, -1, 1],
];

/// Paley-construction base of order 20 (sign matrix).
const PALEY_20: [[i8; 20]; 20] = [
    [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    [-1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1],
    [-1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1],
    [-1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1],
    [-1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1],
    [-1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1],
    [-1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1],
    [-1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1],
    [-1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1],
    [-1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1],
    [-1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1, 1],
    [-1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1, -1],
    [-1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1, 1],
    [-1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1, 1],
    [-1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1, 1],
    [-1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1, 1],
    [-1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1, -1],
    [-1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1, -1],
    [-1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1, 1],
    [-1, 1, -1, -1, 1, 1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, 1, 1, -1, 1],
];

/// How a supported order factors: a power of two times an optional odd base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HadamardRecipe {
    /// Sylvester recursion from H1 = [1]; order = 2^k.
    Sylvester { log2: u32 },
    /// Kronecker product `base (x) Sylvester(2^k)`; order = base * 2^k.
    KroneckerBase { base: usize, log2: u32 },
}

/// Orthonormal Hadamard matrix: every entry is +-1/sqrt(m).
#[derive(Debug, Clone)]
pub struct HadamardMatrix {
    pub order: usize,
    pub recipe: HadamardRecipe,
    matrix: Tensor,
}

impl HadamardMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }
}

/// Decide how (and whether) an order can be built.
pub fn hadamard_recipe(m: usize) -> Result<HadamardRecipe> {
    if m == 0 {
        return Err(MqError::UnsupportedHadamardOrder { order: m });
    }
    let tz = m.trailing_zeros();
    let odd = m >> tz;
    match odd {
        1 => Ok(HadamardRecipe::Sylvester { log2: tz }),
        // 12 = 4*3 and 20 = 4*5: the odd parts 3 and 5 each borrow two
        // factors of two from the power-of-two part.
        3 if tz >= 2 => Ok(HadamardRecipe::KroneckerBase { base: 12, log2: tz - 2 }),
        5 if tz >= 2 => Ok(HadamardRecipe::KroneckerBase { base: 20, log2: tz - 2 }),
        _ => Err(MqError::UnsupportedHadamardOrder { order: m }),
    }
}

/// Sign matrix (+-1 entries) for a supported order.
fn sign_matrix(recipe: HadamardRecipe) -> Vec<Vec<i8>> {
    fn sylvester(log2: u32) -> Vec<Vec<i8>> {
        let mut h = vec![vec![1i8]];
        for _ in 0..log2 {
            let n = h.len();
            let mut next = vec![vec![0i8; 2 * n]; 2 * n];
            for i in 0..n {
                for j in 0..n {
                    let v = h[i][j];
                    next[i][j] = v;
                    next[i][j + n] = v;
                    next[i + n][j] = v;
                    next[i + n][j + n] = -v;
                }
            }
            h = next;
        }
        h
    }
    fn base(order: usize) -> Vec<Vec<i8>> {
        match order {
            12 => PALEY_12.iter().map(|r| r.to_vec()).collect(),
            20 => PALEY_20.iter().map(|r| r.to_vec()).collect(),
            _ => unreachable!(),
        }
    }
    match recipe {
        HadamardRecipe::Sylvester { log2 } => sylvester(log2),
        HadamardRecipe::KroneckerBase { base: b, log2 } => {
            let a = base(b);
            let c = sylvester(log2);
            let (na, nc) = (a.len(), c.len());
            let n = na * nc;
            let mut out = vec![vec![0i8; n]; n];
            for ia in 0..na {
                for ic in 0..nc {
                    for ja in 0..na {
                        for jc in 0..nc {
                            out[ia * nc + ic][ja * nc + jc] = a[ia][ja] * c[ic][jc];
                        }
                    }
                }
            }
            out
        }
    }
}

/// Construct the orthonormal Hadamard matrix of order `m`.
///
/// Supported orders: `2^k`, `2^k * 12`, and `2^k * 20`. Every entry is
/// exactly the float representation of `+-1/sqrt(m)`.
pub fn hadamard(m: usize) -> Result<HadamardMatrix> {
    let recipe = hadamard_recipe(m)?;
    let signs = sign_matrix(recipe);
    let scale = 1.0 / (m as f64).sqrt();
    let mut t = Tensor::zeros(vec![m, m]);
    for (i, row) in signs.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            t.set(i, j, s as f64 * scale);
        }
    }
    Ok(HadamardMatrix { order: m, recipe, matrix: t })
}

/// In-place normalized FWHT butterfly over a slice whose length is 2^k.
fn fwht_rows_pow2(row: &mut [f64], normalize: bool) {
    let n = row.len();
    let mut stride = 1;
    while stride < n {
        let mut i = 0;
        while i < n {
            for j in i..i + stride {
                let a = row[j];
                let b = row[j + stride];
                row[j] = a + b;
                row[j + stride] = a - b;
            }
            i += stride * 2;
        }
        stride *= 2;
    }
    if normalize {
        let scale = 1.0 / (n as f64).sqrt();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
}

/// Apply the Hadamard transform along the last dimension of `x`.
///
/// For orders `2^k` this is the O(m log m) butterfly; for `2^k * {12,20}`
/// the butterfly handles the power-of-two factor and a dense multiply by the
/// embedded base matrix handles the rest, following the Kronecker layout of
/// [`hadamard`]. With `normalize` the result equals `x * hadamard(m)`.
pub fn fwht_apply(x: &Tensor, normalize: bool) -> Result<Tensor> {
    let m = x.ncols();
    let recipe = hadamard_recipe(m)?;
    let mut out = x.clone();
    match recipe {
        HadamardRecipe::Sylvester { .. } => {
            let n = out.ncols();
            for row in out.data_mut().chunks_mut(n) {
                fwht_rows_pow2(row, normalize);
            }
        }
        HadamardRecipe::KroneckerBase { base, log2 } => {
            let chunk = 1usize << log2;
            let nb = base;
            let base_signs = sign_matrix(HadamardRecipe::KroneckerBase { base, log2: 0 });
            let total = out.ncols();
            let mut scratch = vec![0.0; total];
            for row in out.data_mut().chunks_mut(total) {
                // power-of-two factor on contiguous chunks
                for c in row.chunks_mut(chunk) {
                    fwht_rows_pow2(c, false);
                }
                // dense base mix across chunk index
                for jc in 0..chunk {
                    for ja in 0..nb {
                        let mut acc = 0.0;
                        for ia in 0..nb {
                            acc += row[ia * chunk + jc] * base_signs[ia][ja] as f64;
                        }
                        scratch[ja * chunk + jc] = acc;
                    }
                }
                let scale = if normalize { 1.0 / (total as f64).sqrt() } else { 1.0 };
                for (dst, &src) in row.iter_mut().zip(&scratch) {
                    *dst = src * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Covariance `X^T X / (n-1)` after optional column centering.
///
/// Centering defaults to true in callers because the variance-equalization
/// analysis assumes zero-mean columns.
pub fn covariance(x: &Tensor, center: bool) -> Result<Tensor> {
    if !x.is_matrix() {
        return Err(MqError::shape("covariance expects a matrix", x.shape(), &[]));
    }
    let (n, m) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(MqError::TooFewRows { what: "covariance", rows: n });
    }
    let centered;
    let xref = if center {
        let mut means = vec![0.0; m];
        for i in 0..n {
            for (j, mu) in means.iter_mut().enumerate() {
                *mu += x.at(i, j);
            }
        }
        for mu in means.iter_mut() {
            *mu /= n as f64;
        }
        let mut c = x.clone();
        for i in 0..n {
            for j in 0..m {
                let v = c.at(i, j) - means[j];
                c.set(i, j, v);
            }
        }
        centered = c;
        &centered
    } else {
        x
    };
    let cov = matmul(&xref.transpose(), xref)?;
    Ok(cov.map(|v| v / (n - 1) as f64))
}

/// A rotation `H_K = K H` built from calibration covariance.
#[derive(Debug, Clone)]
pub struct KltRotation {
    /// Which interface the covariance came from.
    pub source: String,
    /// Eigenvector matrix, columns ordered by descending eigenvalue.
    pub k: Tensor,
    /// Eigenvalues, descending; entries below `1e-12 * max` floored to zero.
    pub eigenvalues: Vec<f64>,
    /// The Hadamard factor.
    pub hadamard: HadamardMatrix,
    /// `K * H`.
    pub h_k: Tensor,
}

/// Build the enhanced rotation from a symmetric PSD covariance.
///
/// The order must be supported by [`hadamard`]; eigendecomposition failures
/// propagate.
pub fn klt_enhanced(cov: &Tensor, source: impl Into<String>) -> Result<KltRotation> {
    let m = cov.nrows();
    let had = hadamard(m)?;
    let EighResult { eigenvectors, mut eigenvalues } = jacobi_eigh(cov, None, None)?;
    let floor = eigenvalues.first().copied().unwrap_or(0.0).abs() * 1e-12;
    for l in eigenvalues.iter_mut() {
        if l.abs() < floor {
            *l = 0.0;
        }
    }
    let h_k = matmul(&eigenvectors, had.matrix())?;
    Ok(KltRotation {
        source: source.into(),
        k: eigenvectors,
        eigenvalues,
        hadamard: had,
        h_k,
    })
}

/// Result of [`rotated_channel_variances`]: the diagonal of `cov(x r)` plus
/// the orthogonality residual of `r` so report writers can flag a
/// non-orthogonal rotation instead of erroring out.
#[derive(Debug, Clone)]
pub struct RotatedVariances {
    pub variances: Vec<f64>,
    pub orthogonality_residual: f64,
}

/// Per-channel variances of `x * r` (centered, n-1 denominator).
pub fn rotated_channel_variances(x: &Tensor, r: &Tensor) -> Result<RotatedVariances> {
    if x.ncols() != r.nrows() {
        return Err(MqError::shape("rotation order vs channel count", x.shape(), r.shape()));
    }
    let residual = orthogonality_residual(r);
    let rotated = matmul(x, r)?;
    let cov = covariance(&rotated, true)?;
    let variances = (0..cov.nrows()).map(|i| cov.at(i, i)).collect();
    Ok(RotatedVariances { variances, orthogonality_residual: residual })
}
