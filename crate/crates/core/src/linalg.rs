//! Dense linear-algebra helpers shared by the stability and control modules:
//! Lyapunov solves, spectra, norms and PBH rank tests.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{GridError, Result};

/// Relative threshold below which a singular value counts as zero in rank tests.
pub const RANK_TOL: f64 = 1e-9;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::INFINITY)
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .last()
        .copied()
        .unwrap_or(f64::NEG_INFINITY)
}

/// Full spectrum of a general square matrix.
pub fn spectrum(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum (spectral abscissa).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    spectrum(m)
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Spectral norm of a symmetric matrix via its eigenvalues.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Numerical rank from singular values, relative to the largest one.
fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let sv = m.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let tol = RANK_TOL * smax.max(1.0);
    sv.iter().filter(|s| **s > tol).count()
}

/// PBH controllability test: `rank [A - λI, B] = n` at every eigenvalue λ of A.
/// Returns the eigenvalues at which the rank drops.
pub fn pbh_controllability_failures(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Complex<f64>> {
    pbh_failures_at(a, b, spectrum(a))
}

/// PBH test restricted to eigenvalues with `Re λ ≥ −tol` (stabilizability).
pub fn pbh_stabilizability_failures(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    tol: f64,
) -> Vec<Complex<f64>> {
    pbh_failures_at(
        a,
        b,
        spectrum(a).into_iter().filter(|z| z.re >= -tol).collect(),
    )
}

/// Dual of [`pbh_stabilizability_failures`] (detectability).
pub fn pbh_detectability_failures(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    tol: f64,
) -> Vec<Complex<f64>> {
    pbh_stabilizability_failures(&a.transpose(), &c.transpose(), tol)
}

fn pbh_failures_at(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eigs: Vec<Complex<f64>>,
) -> Vec<Complex<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    eigs.into_iter()
        .filter(|lambda| {
            let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + m);
            for i in 0..n {
                for j in 0..n {
                    let shift = if i == j {
                        *lambda
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                    pencil[(i, j)] = Complex::new(a[(i, j)], 0.0) - shift;
                }
                for j in 0..m {
                    pencil[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
                }
            }
            complex_rank(&pencil) < n
        })
        .collect()
}

/// Dual PBH observability test: `rank [A - λI; C] = n` at every eigenvalue λ of A.
pub fn pbh_observability_failures(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Vec<Complex<f64>> {
    pbh_controllability_failures(&a.transpose(), &c.transpose())
}

/// Diagonal block layout (start, size) of a real quasi-upper-triangular matrix.
fn quasi_triangular_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut k = 0;
    while k < n {
        if k + 1 < n && t[(k + 1, k)] != 0.0 {
            blocks.push((k, 2));
            k += 2;
        } else {
            blocks.push((k, 1));
            k += 1;
        }
    }
    blocks
}

/// Solve `Tkᵀ Y + Y Tl = R` for blocks of size at most 2 by vectorization.
fn solve_small_sylvester(
    tk: &DMatrix<f64>,
    tl: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, q) = (tk.nrows(), tl.nrows());
    let dim = p * q;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    // column-major vec: index(a, b) = a + p * b
    for b in 0..q {
        for a in 0..p {
            let row = a + p * b;
            for a2 in 0..p {
                k[(row, a2 + p * b)] += tk[(a2, a)];
            }
            for b2 in 0..q {
                k[(row, a + p * b2)] += tl[(b2, b)];
            }
        }
    }
    let rhs = DVector::from_iterator(dim, r.iter().copied());
    let sol = k.lu().solve(&rhs).ok_or_else(|| {
        GridError::Domain("Lyapunov operator is singular (eigenvalues sum to zero)".into())
    })?;
    Ok(DMatrix::from_column_slice(p, q, sol.as_slice()))
}

/// Solve the continuous Lyapunov equation `Aᵀ X + X A + Q = 0`.
///
/// Bartels–Stewart: real Schur form `A = U T Uᵀ`, block forward substitution on
/// the quasi-triangular system, then back-transformation. The result is
/// symmetrized when `Q` is symmetric.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(GridError::Dimension {
            expected: n,
            actual: a.ncols(),
        });
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(GridError::Dimension {
            expected: n,
            actual: q.nrows(),
        });
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let max_iter = 200 * n;
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, max_iter)
        .ok_or(GridError::Iteration {
            iterations: max_iter,
            residual: f64::NAN,
        })?;
    let (u, t) = schur.unpack();
    let c = -(u.transpose() * q * &u);
    let blocks = quasi_triangular_blocks(&t);
    let mut y = DMatrix::<f64>::zeros(n, n);
    for &(p, s1) in &blocks {
        let tk = t.view((p, p), (s1, s1)).clone_owned();
        for &(qs, s2) in &blocks {
            let tl = t.view((qs, qs), (s2, s2)).clone_owned();
            let mut r = c.view((p, qs), (s1, s2)).clone_owned();
            if p > 0 {
                r -= t.view((0, p), (p, s1)).transpose() * y.view((0, qs), (p, s2));
            }
            if qs > 0 {
                r -= y.view((p, 0), (s1, qs)) * t.view((0, qs), (qs, s2));
            }
            let blk = solve_small_sylvester(&tk, &tl, &r)?;
            y.view_mut((p, qs), (s1, s2)).copy_from(&blk);
        }
    }
    let x = &u * y * u.transpose();
    if (q - q.transpose()).amax() <= 1e-14 * q.amax().max(1.0) {
        Ok(symmetrize(&x))
    } else {
        Ok(x)
    }
}

/// Frobenius norm of `AᵀX + XA + Q`.
pub fn lyapunov_residual(a: &DMatrix<f64>, x: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (a.transpose() * x + x * a + q).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Kronecker-product oracle for small Lyapunov equations.
    fn lyapunov_kron(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let at = a.transpose();
        let mut k = DMatrix::<f64>::zeros(n * n, n * n);
        for col in 0..n {
            for row in 0..n {
                let r = row + n * col;
                for l in 0..n {
                    k[(r, l + n * col)] += at[(row, l)];
                    k[(r, row + n * l)] += a[(l, col)];
                }
            }
        }
        let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
        let sol = k.lu().solve(&rhs).unwrap();
        DMatrix::from_column_slice(n, n, sol.as_slice())
    }

    #[test]
    fn scalar_lyapunov() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = solve_lyapunov(&a, &q).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_kronecker_oracle_with_complex_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3, 5, 8] {
            // shift a random matrix to make it Hurwitz; random matrices carry complex pairs
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let shift = spectral_abscissa(&a) + 0.5;
            for i in 0..n {
                a[(i, i)] -= shift;
            }
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let q = &g * g.transpose();
            let x = solve_lyapunov(&a, &q).unwrap();
            let oracle = lyapunov_kron(&a, &q);
            assert!(
                (&x - &oracle).amax() < 1e-10 * oracle.amax().max(1.0),
                "n = {n}"
            );
            assert!(lyapunov_residual(&a, &x, &q) < 1e-10 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn pbh_detects_missing_input() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(pbh_controllability_failures(&a, &b).is_empty());
        let fails = pbh_controllability_failures(&a, &DMatrix::zeros(2, 1));
        assert_eq!(fails.len(), 2);
    }

    #[test]
    fn abscissa_and_norms() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert_eq!(spectral_abscissa(&a), -1.0);
        assert!((spectral_norm(&a) - 2.0).abs() < 1e-14);
        assert!((sym_spectral_norm(&a) - 2.0).abs() < 1e-14);
        let bd = block_diag(&[a.clone(), DMatrix::from_element(1, 2, 3.0)]);
        assert_eq!(bd.shape(), (3, 4));
        assert_eq!(bd[(2, 3)], 3.0);
    }
}
