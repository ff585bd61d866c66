//! Symmetric eigendecomposition via cyclic Jacobi rotations.

use crate::error::{MqError, Result};
use crate::tensor::{matmul, Tensor};

/// Result of [`jacobi_eigh`]: `K diag(eigenvalues) K^T` reconstructs the input.
///
/// Columns of `eigenvectors` are the eigenvectors, ordered by descending
/// eigenvalue. Column signs are fixed so the largest-magnitude entry of each
/// column is positive, which makes the decomposition deterministic.
#[derive(Debug, Clone)]
pub struct EighResult {
    pub eigenvectors: Tensor,
    pub eigenvalues: Vec<f64>,
}

/// Default relative tolerance: iteration stops once the largest off-diagonal
/// magnitude drops below `1e-12 * max|S|`.
pub const DEFAULT_TOL_FACTOR: f64 = 1e-12;
/// Default sweep limit.
pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(S + S^T)/2` before iterating, but an
/// asymmetry above 1e-8 (relative to the largest entry) is rejected since it
/// indicates the caller passed the wrong matrix.
pub fn jacobi_eigh(s: &Tensor, tol: Option<f64>, max_sweeps: Option<usize>) -> Result<EighResult> {
    if !s.is_matrix() || s.nrows() != s.ncols() {
        return Err(MqError::NonSquare {
            rows: s.nrows(),
            cols: if s.is_matrix() { s.ncols() } else { 0 },
        });
    }
    let m = s.nrows();
    let scale = s.max_abs();

    let mut asym = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            asym = asym.max((s.at(i, j) - s.at(j, i)).abs());
        }
    }
    if asym > 1e-8 * scale.max(1.0) {
        return Err(MqError::NonSymmetric { asymmetry: asym });
    }

    let tol = tol.unwrap_or(DEFAULT_TOL_FACTOR * scale);
    let max_sweeps = max_sweeps.unwrap_or(DEFAULT_MAX_SWEEPS);

    // work on the symmetrized copy
    let mut a = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            a[i * m + j] = 0.5 * (s.at(i, j) + s.at(j, i));
        }
    }
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }

    let off = |a: &[f64]| -> f64 {
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in (i + 1)..m {
                worst = worst.max(a[i * m + j].abs());
            }
        }
        worst
    };

    let mut residual = off(&a);
    let mut sweeps = 0;
    while residual > tol && sweeps < max_sweeps {
        for p in 0..m.saturating_sub(1) {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * m + p];
                let aqq = a[q * m + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e150 {
                    // avoid overflow in theta^2; limit of the formula below
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                let tau = sn / (1.0 + c);

                a[p * m + p] = app - t * apq;
                a[q * m + q] = aqq + t * apq;
                a[p * m + q] = 0.0;
                a[q * m + p] = 0.0;
                for k in 0..m {
                    if k != p && k != q {
                        let akp = a[k * m + p];
                        let akq = a[k * m + q];
                        let new_p = akp - sn * (akq + tau * akp);
                        let new_q = akq + sn * (akp - tau * akq);
                        a[k * m + p] = new_p;
                        a[p * m + k] = new_p;
                        a[k * m + q] = new_q;
                        a[q * m + k] = new_q;
                    }
                }
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = vkp - sn * (vkq + tau * vkp);
                    v[k * m + q] = vkq + sn * (vkp - tau * vkq);
                }
            }
        }
        sweeps += 1;
        residual = off(&a);
    }
    if residual > tol {
        return Err(MqError::NotConverged { sweeps, residual });
    }

    // sort descending by eigenvalue, then fix column signs
    let mut order: Vec<usize> = (0..m).collect();
    let eigvals: Vec<f64> = (0..m).map(|i| a[i * m + i]).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());

    let mut k = Tensor::zeros(vec![m, m]);
    let mut sorted_vals = Vec::with_capacity(m);
    for (dst, &src) in order.iter().enumerate() {
        sorted_vals.push(eigvals[src]);
        // find the largest-magnitude entry; flip the column if it is negative
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..m {
            let mag = v[r * m + src].abs();
            if mag > best_abs {
                best_abs = mag;
                best = r;
            }
        }
        let flip = if v[best * m + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            k.set(r, dst, flip * v[r * m + src]);
        }
    }

    Ok(EighResult { eigenvectors: k, eigenvalues: sorted_vals })
}

impl EighResult {
    /// `K diag(lambda) K^T`, for reconstruction checks.
    pub fn reconstruct(&self) -> Tensor {
        let m = self.eigenvalues.len();
        let mut kl = self.eigenvectors.clone();
        for j in 0..m {
            for i in 0..m {
                let v = kl.at(i, j) * self.eigenvalues[j];
                kl.set(i, j, v);
            }
        }
        matmul(&kl, &self.eigenvectors.transpose()).unwrap()
    }

    /// `max |K K^T - I|`.
    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.eigenvectors)
    }
}

/// `max |R R^T - I|` for a square matrix.
pub fn orthogonality_residual(r: &Tensor) -> f64 {
    let m = r.nrows();
    let prod = matmul(r, &r.transpose()).unwrap();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let expect = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((prod.at(i, j) - expect).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256PlusPlus;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
    }

    #[test]
    fn already_diagonal() {
        let s = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = jacobi_eigh(&s, None, None).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert!((e.eigenvectors.at(0, 0).abs() - 1.0).abs() < 1e-15);
        assert!((e.eigenvectors.at(1, 1).abs() - 1.0).abs() < 1e-15);
    }

    // Hand-solved characteristic polynomial of [[2,1],[1,2]]:
    // lambda^2 - 4 lambda + 3 = 0 -> 3 and 1, eigenvectors (1,1)/sqrt2 and
    // (1,-1)/sqrt2 up to sign.
    #[test]
    fn two_by_two_hand_solution() {
        let s = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = jacobi_eigh(&s, None, None).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for (i, expect) in [(0usize, inv_sqrt2), (1usize, inv_sqrt2)] {
            assert!((e.eigenvectors.at(i, 0).abs() - expect).abs() < 1e-12);
        }
        let recon = e.reconstruct();
        assert!(max_abs_diff(&recon, &s) < 1e-12);
    }

    #[test]
    fn fixture_covariance_reconstructs() {
        let r = Tensor::from_rows(&[
            vec![3.0, -1.0, 0.0, -4.0],
            vec![-2.0, 3.0, -3.0, 1.0],
            vec![1.0, -3.0, 4.0, -3.0],
            vec![-2.0, 1.0, -1.0, 6.0],
        ])
        .unwrap();
        let cov = matmul(&r.transpose(), &r).unwrap().map(|v| v / 3.0);
        let e = jacobi_eigh(&cov, None, None).unwrap();
        let recon = e.reconstruct();
        assert!(max_abs_diff(&recon, &cov) < 1e-9 * cov.max_abs());
    }

    #[test]
    fn random_symmetric_invariants() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for _ in 0..20 {
            let m = 8;
            let mut s = Tensor::zeros(vec![m, m]);
            for i in 0..m {
                for j in i..m {
                    let v = rng.uniform(-2.0, 2.0);
                    s.set(i, j, v);
                    s.set(j, i, v);
                }
            }
            let e = jacobi_eigh(&s, None, None).unwrap();
            assert!(e.orthogonality_residual() < 1e-9);
            assert!(max_abs_diff(&e.reconstruct(), &s) <= 1e-9 * s.max_abs());
            // trace preservation
            let trace: f64 = (0..m).map(|i| s.at(i, i)).sum();
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((trace - sum).abs() <= 1e-9 * trace.abs().max(1.0));
            // sorted descending
            for w in e.eigenvalues.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn psd_eigenvalues_nonnegative() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let rows: Vec<Vec<f64>> =
            (0..16).map(|_| (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let cov = matmul(&x.transpose(), &x).unwrap();
        let e = jacobi_eigh(&cov, None, None).unwrap();
        for &l in &e.eigenvalues {
            assert!(l >= -1e-10);
        }
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        let rect = Tensor::zeros(vec![2, 3]);
        assert!(matches!(jacobi_eigh(&rect, None, None), Err(MqError::NonSquare { .. })));
        let asym = Tensor::from_rows(&[vec![1.0, 5.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&asym, None, None), Err(MqError::NonSymmetric { .. })));
    }
}
