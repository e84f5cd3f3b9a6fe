//! Matrix-free Krylov solvers and a tridiagonal direct solver.

use crate::scalar::Real;

/// Outcome of an iterative solve.
#[derive(Debug, Clone, PartialEq)]
pub struct KrylovReport {
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual `|b - Ax| / |b|` after each outer cycle, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

impl KrylovReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }
}

pub(crate) fn norm<S: Real>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations.
///
/// `apply(x, y)` must write `A x` into `y`. `x` holds the initial guess on
/// entry and the approximate solution on return.
pub fn gmres<S: Real>(
    mut apply: impl FnMut(&[S], &mut [S]),
    b: &[S],
    x: &mut [S],
    tol: S,
    restart: usize,
    max_iter: usize,
) -> KrylovReport {
    let n = b.len();
    let restart = restart.max(1).min(n.max(1));
    let b_norm = norm(b);
    let mut history = Vec::new();
    if b_norm == S::zero() {
        x.iter_mut().for_each(|v| *v = S::zero());
        history.push(0.0);
        return KrylovReport {
            iterations: 0,
            converged: true,
            residual_history: history,
        };
    }

    let mut r = vec![S::zero(); n];
    let mut w = vec![S::zero(); n];
    let mut basis: Vec<Vec<S>> = Vec::with_capacity(restart + 1);
    let mut hess = vec![vec![S::zero(); restart]; restart + 1];
    let mut cs = vec![S::zero(); restart];
    let mut sn = vec![S::zero(); restart];
    let mut g = vec![S::zero(); restart + 1];
    let mut iterations = 0;

    loop {
        apply(x, &mut r);
        for (ri, &bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let beta = norm(&r);
        let rel = beta / b_norm;
        history.push(rel.as_f64());
        if rel <= tol || iterations >= max_iter {
            return KrylovReport {
                iterations,
                converged: rel <= tol,
                residual_history: history,
            };
        }

        basis.clear();
        basis.push(r.iter().map(|&v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = S::zero());
        g[0] = beta;
        let mut k = 0;
        while k < restart && iterations < max_iter {
            apply(&basis[k], &mut w);
            for (i, vi) in basis.iter().enumerate() {
                let hik = dot(&w, vi);
                hess[i][k] = hik;
                for (wj, &vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let h_next = norm(&w);
            hess[k + 1][k] = h_next;
            for i in 0..k {
                let (a, c) = (hess[i][k], hess[i + 1][k]);
                hess[i][k] = cs[i] * a + sn[i] * c;
                hess[i + 1][k] = -sn[i] * a + cs[i] * c;
            }
            let (a, c) = (hess[k][k], hess[k + 1][k]);
            let denom = (a * a + c * c).sqrt();
            if denom == S::zero() {
                cs[k] = S::one();
                sn[k] = S::zero();
            } else {
                cs[k] = a / denom;
                sn[k] = c / denom;
            }
            hess[k][k] = denom;
            hess[k + 1][k] = S::zero();
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k] * g[k];
            iterations += 1;
            k += 1;
            let breakdown = h_next <= S::default_epsilon() * b_norm;
            if g[k].abs() / b_norm <= tol || breakdown {
                break;
            }
            basis.push(w.iter().map(|&v| v / h_next).collect());
        }

        // Back substitution for the least-squares coefficients.
        let mut y = vec![S::zero(); k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= hess[i][j] * y[j];
            }
            y[i] = s / hess[i][i];
        }
        for (j, &yj) in y.iter().enumerate() {
            for (xi, &vi) in x.iter_mut().zip(&basis[j]) {
                *xi += yj * vi;
            }
        }
    }
}

/// Conjugate gradients for a symmetric positive definite operator.
pub fn conjugate_gradient<S: Real>(
    mut apply: impl FnMut(&[S], &mut [S]),
    b: &[S],
    x: &mut [S],
    tol: S,
    max_iter: usize,
) -> KrylovReport {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == S::zero() {
        x.iter_mut().for_each(|v| *v = S::zero());
        return KrylovReport {
            iterations: 0,
            converged: true,
            residual_history: vec![0.0],
        };
    }
    let mut r = vec![S::zero(); n];
    apply(x, &mut r);
    for (ri, &bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut p = r.clone();
    let mut ap = vec![S::zero(); n];
    let mut rr = dot(&r, &r);
    let mut history = vec![(rr.sqrt() / b_norm).as_f64()];
    let mut iterations = 0;
    while rr.sqrt() / b_norm > tol && iterations < max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
        history.push((rr.sqrt() / b_norm).as_f64());
    }
    KrylovReport {
        iterations,
        converged: rr.sqrt() / b_norm <= tol,
        residual_history: history,
    }
}

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `lower[0]` and `upper[n-1]` are ignored. Returns `None` on a zero pivot.
pub fn solve_tridiagonal<S: Real>(lower: &[S], diag: &[S], upper: &[S], rhs: &mut [S]) -> Option<()> {
    let n = diag.len();
    let mut c = vec![S::zero(); n];
    let mut beta = diag[0];
    if beta == S::zero() {
        return None;
    }
    rhs[0] /= beta;
    for i in 1..n {
        c[i - 1] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == S::zero() {
            return None;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= c[i] * next;
    }
    Some(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn test_matrix(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                4.0 + i as f64 * 0.1
            } else {
                ((i * 7 + j * 3) % 5) as f64 * 0.1 - 0.2
            }
        })
    }

    #[test]
    fn gmres_matches_direct_solve() {
        let n = 40;
        let a = test_matrix(n);
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let exact = a.clone().lu().solve(&b).unwrap();
        for restart in [5, 40] {
            let mut x = vec![0.0; n];
            let rep = gmres(
                |v, out| out.copy_from_slice((&a * DVector::from_column_slice(v)).as_slice()),
                b.as_slice(),
                &mut x,
                1e-12,
                restart,
                1000,
            );
            assert!(rep.converged);
            for i in 0..n {
                assert!((x[i] - exact[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let mut x = vec![1.0; 3];
        let rep = gmres(|v, o| o.copy_from_slice(v), &[0.0; 3], &mut x, 1e-10, 3, 10);
        assert!(rep.converged);
        assert_eq!(x, vec![0.0; 3]);
    }

    #[test]
    fn cg_matches_direct_solve() {
        let n = 30;
        let m = test_matrix(n);
        let a = &m * m.transpose();
        let b = DVector::from_fn(n, |i, _| 1.0 + i as f64);
        let exact = a.clone().cholesky().unwrap().solve(&b);
        let mut x = vec![0.0; n];
        let rep = conjugate_gradient(
            |v, out| out.copy_from_slice((&a * DVector::from_column_slice(v)).as_slice()),
            b.as_slice(),
            &mut x,
            1e-13,
            500,
        );
        assert!(rep.converged);
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-9 * exact.amax());
        }
    }

    #[test]
    fn thomas_matches_dense() {
        let n = 12;
        let lower: Vec<f64> = (0..n).map(|i| -1.0 - 0.01 * i as f64).collect();
        let upper: Vec<f64> = (0..n).map(|i| -1.0 + 0.02 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 3.0 + 0.1 * i as f64).collect();
        let a = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                diag[i]
            } else if j + 1 == i {
                lower[i]
            } else if i + 1 == j {
                upper[i]
            } else {
                0.0
            }
        });
        let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let exact = a.lu().solve(&DVector::from_vec(b.clone())).unwrap();
        let mut x = b;
        solve_tridiagonal(&lower, &diag, &upper, &mut x).unwrap();
        for i in 0..n {
            assert!((x[i] - exact[i]).abs() < 1e-13);
        }
    }
}
