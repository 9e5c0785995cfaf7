//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! All matrices we decompose are symmetric (Gram matrices, Hessian blocks),
//! and the sizes stay at or below a few hundred, where Jacobi is simple,
//! dependency-free and accurate.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Relative asymmetry above which the input is rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct EigDecomposition {
    /// Eigenvalues sorted in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, ordered to match `values`.
    pub vectors: Matrix,
}

/// Decomposes a symmetric matrix. Fails on non-square input or when the
/// relative asymmetry max|a_ij - a_ji| / max|a_ij| exceeds 1e-10.
pub fn sym_eig(m: &Matrix) -> Result<EigDecomposition> {
    let n = m.rows();
    if n != m.cols() {
        return Err(Error::Shape(format!("sym_eig needs square input, got {}x{}", n, m.cols())));
    }
    let scale = m.max_abs();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m.at(i, j) - m.at(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Asymmetric {
            asymmetry: asym / scale.max(f64::MIN_POSITIVE),
            tolerance: SYMMETRY_TOLERANCE,
        });
    }

    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, 0.5 * (m.at(i, j) + m.at(j, i)));
        }
    }
    let mut v = Matrix::identity(n);

    if n > 1 {
        let frob = a.frobenius_norm().max(f64::MIN_POSITIVE);
        let target = 1e-14 * frob;
        let max_sweeps = 100;
        let mut converged = false;
        for _ in 0..max_sweeps {
            let off = off_diagonal_norm(&a);
            if off <= target {
                converged = true;
                break;
            }
            for p in 0..n - 1 {
                for q in p + 1..n {
                    rotate(&mut a, &mut v, p, q);
                }
            }
        }
        if !converged && off_diagonal_norm(&a) > 1e-10 * frob {
            return Err(Error::Eigensolver { off: off_diagonal_norm(&a) });
        }
    }

    // Sort descending; ties keep the lower original index first.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.at(j, j)
            .partial_cmp(&a.at(i, i))
            .expect("eigenvalues are finite")
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a.at(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vectors.set(i, new_j, v.at(i, old_j));
        }
    }
    Ok(EigDecomposition { values, vectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a.at(i, j) * a.at(i, j);
            }
        }
    }
    sum.sqrt()
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.at(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.at(p, p);
    let aqq = a.at(q, q);
    // Skip rotations that cannot change anything at working precision.
    if apq.abs() <= f64::EPSILON * 1e-2 * (app.abs() + aqq.abs()) {
        a.set(p, q, 0.0);
        a.set(q, p, 0.0);
        return;
    }
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    let n = a.rows();
    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = a.at(i, p);
        let aiq = a.at(i, q);
        let new_p = c * aip - s * aiq;
        let new_q = s * aip + c * aiq;
        a.set(i, p, new_p);
        a.set(p, i, new_p);
        a.set(i, q, new_q);
        a.set(q, i, new_q);
    }
    for i in 0..n {
        let vip = v.at(i, p);
        let viq = v.at(i, q);
        v.set(i, p, c * vip - s * viq);
        v.set(i, q, s * vip + c * viq);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;

    fn residual(m: &Matrix, eig: &EigDecomposition) -> f64 {
        let n = m.rows();
        let mut worst = 0.0f64;
        for k in 0..n {
            let v: Vec<f64> = (0..n).map(|i| eig.vectors.at(i, k)).collect();
            let mv = m.matvec(&v);
            let mut err = 0.0;
            for i in 0..n {
                let d = mv[i] - eig.values[k] * v[i];
                err += d * d;
            }
            worst = worst.max(err.sqrt());
        }
        worst
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert_eq!(eig.values, vec![2.0, 1.0]);
    }

    #[test]
    fn identity_matrix() {
        let eig = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn off_diagonal_pair() {
        // Characteristic polynomial x^2 - 1 by hand: eigenvalues 1 and -1.
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let eig = sym_eig(&m).unwrap();
        assert!((eig.values[0] - 1.0).abs() < 1e-12);
        assert!((eig.values[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.1, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn rejects_non_square() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&m), Err(Error::Shape(_))));
    }

    #[test]
    fn random_reconstruction_up_to_256() {
        let mut rng = RngState::seed_from_u64(1234);
        for n in [3usize, 8, 32, 128, 256] {
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let v = rng.normal();
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            let eig = sym_eig(&m).unwrap();
            let frob = m.frobenius_norm();
            // eigenpair residual
            assert!(residual(&m, &eig) <= 1e-8 * frob, "residual too large at n={n}");
            // reconstruction V diag(l) V^T
            let mut recon = Matrix::zeros(n, n);
            for k in 0..n {
                let lk = eig.values[k];
                for i in 0..n {
                    let vik = eig.vectors.at(i, k);
                    if vik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let val = recon.at(i, j) + lk * vik * eig.vectors.at(j, k);
                        recon.set(i, j, val);
                    }
                }
            }
            let diff = recon.sub(&m).unwrap().frobenius_norm();
            assert!(diff <= 1e-8 * frob, "reconstruction error {diff} at n={n}");
        }
    }
}
