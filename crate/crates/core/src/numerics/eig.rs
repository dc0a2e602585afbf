//! Symmetric eigendecomposition (cyclic Jacobi) and dominant-eigenvalue
//! estimation (power iteration).

use super::mat::{dot, Mat};
use super::rng::seeded_rng;
use crate::error::{Error, Result};
use rand::Rng;

/// Eigendecomposition of a symmetric matrix: `A = V diag(values) V^T`.
///
/// Eigenvalues are sorted ascending; `vectors` holds the matching
/// eigenvectors as orthonormal columns.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

const MAX_SWEEPS: usize = 60;
const SYMMETRY_TOL: f64 = 1e-10;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Rotations follow the classic annihilation scheme (Numerical Recipes
/// §11.1): each sweep visits every off-diagonal element once and zeroes it
/// with a plane rotation, accumulating the rotations into the eigenvector
/// matrix. Convergence is quadratic; the loop exits when the off-diagonal
/// sum underflows to zero.
pub fn sym_eig(a: &Mat) -> Result<EigenPair> {
    a.check_symmetric(SYMMETRY_TOL, "eigendecomposition input")?;
    a.check_finite("eigendecomposition input")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::validation("cannot decompose an empty matrix"));
    }

    let mut w = a.clone(); // working copy, destroyed
    let mut v = Mat::identity(n);
    let mut d: Vec<f64> = (0..n).map(|i| w.get(i, i)).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    let mut off_sum = 0.0;
    let mut converged = false;
    for sweep in 1..=MAX_SWEEPS {
        off_sum = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off_sum += w.get(p, q).abs();
            }
        }
        if off_sum == 0.0 {
            converged = true;
            break;
        }
        // During the first sweeps, skip elements below a coarse threshold so
        // early rotations target the large entries.
        let tresh = if sweep < 4 {
            0.2 * off_sum / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                let g = 100.0 * apq.abs();
                // After four sweeps, an off-diagonal element that no longer
                // perturbs the diagonal at machine precision is set to zero.
                if sweep > 4 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    w.set(p, q, 0.0);
                    continue;
                }
                if apq.abs() <= tresh {
                    continue;
                }
                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                w.set(p, q, 0.0);
                for j in 0..p {
                    rotate(&mut w, j, p, j, q, s, tau);
                }
                for j in (p + 1)..q {
                    rotate(&mut w, p, j, j, q, s, tau);
                }
                for j in (q + 1)..n {
                    rotate(&mut w, p, j, q, j, s, tau);
                }
                for j in 0..n {
                    rotate(&mut v, j, p, j, q, s, tau);
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps; \
             off-diagonal residual {off_sum:.3e}"
        )));
    }

    // Sort eigenvalues ascending and permute the eigenvector columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            vectors.set(row, new_col, v.get(row, old_col));
        }
    }
    Ok(EigenPair { values, vectors })
}

#[inline]
fn rotate(m: &mut Mat, i: usize, j: usize, k: usize, l: usize, s: f64, tau: f64) {
    let g = m.get(i, j);
    let h = m.get(k, l);
    m.set(i, j, g - s * (h + g * tau));
    m.set(k, l, h + s * (g - h * tau));
}

const POWER_MAX_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-9;

/// Largest eigenvalue of a symmetric positive-semidefinite matrix.
///
/// Power iteration from a seeded random start; the estimate is accepted when
/// successive Rayleigh quotients differ by less than `1e-9`. If the iteration
/// cap is reached (near-degenerate top eigenvalues), falls back to the full
/// Jacobi decomposition and returns its top value.
pub fn lambda_max(a: &Mat, seed: u64) -> Result<f64> {
    a.check_symmetric(SYMMETRY_TOL, "lambda_max input")?;
    a.check_finite("lambda_max input")?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::validation("cannot estimate eigenvalues of an empty matrix"));
    }

    let mut rng = seeded_rng(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut prev2 = f64::NAN;
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let w = mat_vec(a, &v);
        let rayleigh = dot(&v, &w);
        if (rayleigh - prev).abs() < POWER_TOL {
            // The Rayleigh sequence decays geometrically toward the top
            // eigenvalue; Aitken extrapolation cancels the dominant error
            // term, which matters when the spectral gap is small.
            let d1 = prev - prev2;
            let d2 = rayleigh - prev;
            let denom = d1 - d2;
            if prev2.is_finite() && d2 != 0.0 && denom != 0.0 {
                let ratio = d2 / d1;
                if ratio > 0.0 && ratio < 1.0 {
                    return Ok(rayleigh + d2 * d2 / denom);
                }
            }
            return Ok(rayleigh);
        }
        prev2 = prev;
        prev = rayleigh;
        let norm = dot(&w, &w).sqrt();
        if norm < 1e-300 {
            // v is (numerically) in the kernel; for a PSD matrix reached from
            // a random start this means A == 0.
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    log::warn!(
        "power iteration did not converge within {POWER_MAX_ITERS} iterations; \
         falling back to full eigendecomposition"
    );
    let eig = sym_eig(a)?;
    Ok(*eig.values.last().expect("non-empty spectrum"))
}

fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), v)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded_rng;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Mat {
        let mut rng = seeded_rng(seed);
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-2.0..2.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn reconstruction_residual(a: &Mat, eig: &EigenPair) -> f64 {
        let n = a.rows();
        let mut lam = Mat::zeros(n, n);
        for i in 0..n {
            lam.set(i, i, eig.values[i]);
        }
        let rebuilt = eig.vectors.matmul(&lam).matmul_nt(&eig.vectors);
        a.sub(&rebuilt).max_abs()
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let eig = sym_eig(&Mat::identity(3)).unwrap();
        for v in &eig.values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn two_by_two_swap_matrix() {
        let a = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let eig = sym_eig(&a).unwrap();
        assert!((eig.values[0] + 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let a = random_symmetric(10, 7);
        let eig = sym_eig(&a).unwrap();
        assert!(reconstruction_residual(&a, &eig) <= 1e-8);
        // ascending order
        for w in eig.values.windows(2) {
            assert!(w[0] <= w[1]);
        }
        // orthonormal columns
        let gram = eig.vectors.matmul_tn(&eig.vectors);
        assert!(gram.sub(&Mat::identity(10)).max_abs() <= 1e-10);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_non_square_input() {
        let a = Mat::zeros(2, 3);
        assert!(sym_eig(&a).is_err());
    }

    #[test]
    fn lambda_max_of_identity() {
        let lm = lambda_max(&Mat::identity(4), 0).unwrap();
        assert!((lm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_max_matches_full_decomposition() {
        // Random PSD built as G^T G.
        let mut rng = seeded_rng(11);
        let mut g = Mat::zeros(12, 12);
        for i in 0..12 {
            for j in 0..12 {
                g.set(i, j, rng.gen_range(-1.0..1.0));
            }
        }
        let a = g.matmul_tn(&g);
        let lm = lambda_max(&a, 3).unwrap();
        let eig = sym_eig(&a).unwrap();
        assert!((lm - eig.values.last().unwrap()).abs() < 1e-7);
    }

    #[test]
    fn lambda_max_of_zero_matrix() {
        let lm = lambda_max(&Mat::zeros(3, 3), 5).unwrap();
        assert_eq!(lm, 0.0);
    }
}
