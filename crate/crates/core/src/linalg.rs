//! Sparse symmetric storage, preconditioned conjugate gradients, banded
//! Cholesky and a Lanczos iteration for the largest eigenvalue.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{HopError, Result};

/// Symmetric matrix stored as full rows in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(col, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| (self.row_ptr[i]..self.row_ptr[i + 1]).find(|&k| self.cols[k] == i).map_or(0.0, |k| self.vals[k]))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of an iterative solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solve {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||`, recomputed from the returned `x`.
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive definite `a`.
pub fn pcg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Solve> {
    let n = a.n;
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(Solve { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut it = 0;
    while it < max_iter {
        // The recursive residual drifts from the true one; confirm before stopping.
        if norm(&r) <= tol * bnorm {
            let true_res = residual(a, &x, b) / bnorm;
            if true_res <= tol {
                return Ok(Solve { x, iterations: it, relative_residual: true_res });
            }
            a.mul_into(&x, &mut ap);
            for i in 0..n {
                r[i] = b[i] - ap[i];
                z[i] = r[i] * inv_diag[i];
            }
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        a.mul_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let ratio = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + ratio * p[i];
        }
        it += 1;
    }
    let res = residual(a, &x, b) / bnorm;
    if res <= tol {
        return Ok(Solve { x, iterations: it, relative_residual: res });
    }
    Err(HopError::NonConvergence { method: "conjugate gradients", iterations: it, residual: res })
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; a.n];
    a.mul_into(x, &mut ax);
    ax.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt()
}

/// Cholesky factor of a symmetric positive definite band matrix.
///
/// Row `i` stores `L[i][i-w..=i]`, with `w` the half bandwidth.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    w: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Factor a matrix given by its lower band: `lower[i][k] = A[i][i-w+k]`.
    pub fn factor(n: usize, w: usize, mut lower: Vec<f64>) -> Result<Self> {
        let width = w + 1;
        debug_assert_eq!(lower.len(), n * width);
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let mut s = lower[i * width + (j + w - i)];
                let k0 = j0.max(j.saturating_sub(w));
                for k in k0..j {
                    s -= lower[i * width + (k + w - i)] * lower[j * width + (k + w - j)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(HopError::NonConvergence { method: "band Cholesky", iterations: i, residual: s });
                    }
                    lower[i * width + w] = s.sqrt();
                } else {
                    lower[i * width + (j + w - i)] = s / lower[j * width + w];
                }
            }
        }
        Ok(Self { n, w, l: lower })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, w, width) = (self.n, self.w, self.w + 1);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(w)..i {
                s -= self.l[i * width + (k + w - i)] * b[k];
            }
            b[i] = s / self.l[i * width + w];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + w + 1) {
                s -= self.l[k * width + (i + w - k)] * b[k];
            }
            b[i] = s / self.l[i * width + w];
        }
    }
}

/// Largest eigenvalue of a symmetric operator restricted to the span of the
/// Krylov space from `start`, by Lanczos with full reorthogonalization.
///
/// `project` is applied to every new vector (use it to stay orthogonal to a
/// known null space). Stops when the Ritz residual falls below
/// `tol * theta`.
pub fn lanczos_largest<A, P>(
    n: usize,
    mut apply: A,
    project: P,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<f64>
where
    A: FnMut(&[f64], &mut [f64]),
    P: Fn(&mut [f64]),
{
    let mut v = start;
    project(&mut v);
    let nv = norm(&v);
    if nv == 0.0 {
        return Err(HopError::InvalidParameter("Lanczos start vector is degenerate".into()));
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut basis: Vec<Vec<f64>> = vec![v];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let max_iter = max_iter.min(n);
    let mut last = (f64::NAN, f64::INFINITY);
    for m in 0..max_iter {
        apply(&basis[m], &mut w);
        project(&mut w);
        let a = dot(&w, &basis[m]);
        alphas.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        let k = alphas.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (imax, theta) =
            eig.eigenvalues
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
        let ritz_res = (b * eig.eigenvectors[(k - 1, imax)]).abs();
        last = (theta, ritz_res);
        if ritz_res <= tol * theta.abs() || b <= f64::EPSILON * theta.abs() || k == max_iter {
            if ritz_res <= tol * theta.abs() || b <= f64::EPSILON * theta.abs() {
                return Ok(theta);
            }
            break;
        }
        betas.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    Err(HopError::NonConvergence { method: "Lanczos", iterations: alphas.len(), residual: last.1 / last.0.abs() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 2.0)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    #[test]
    fn cg_solves_tridiagonal() {
        let a = tridiag(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let s = pcg(&a, &b, 1e-12, 500).unwrap();
        assert!(s.relative_residual <= 1e-12);
    }

    #[test]
    fn band_cholesky_matches_cg() {
        let n = 30;
        let a = tridiag(n);
        let w = 1;
        let mut lower = vec![0.0; n * (w + 1)];
        for i in 0..n {
            lower[i * 2 + 1] = 2.0;
            if i > 0 {
                lower[i * 2] = -1.0;
            }
        }
        let f = BandCholesky::factor(n, w, lower).unwrap();
        let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let mut x = b.clone();
        f.solve_in_place(&mut x);
        let mut ax = vec![0.0; n];
        a.mul_into(&x, &mut ax);
        for (p, q) in ax.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn lanczos_top_eigenvalue() {
        // eigenvalues of the path Laplacian-like tridiagonal: 2 - 2cos(k pi/(n+1))
        let n = 40;
        let a = tridiag(n);
        let top = lanczos_largest(
            n,
            |x, y| a.mul_into(x, y),
            |_| {},
            (0..n).map(|i| 1.0 + (i as f64 * 0.37).cos()).collect(),
            1e-10,
            n,
        )
        .unwrap();
        let exact = 2.0 - 2.0 * (n as f64 * std::f64::consts::PI / (n as f64 + 1.0)).cos();
        assert!((top - exact).abs() < 1e-8, "{top} vs {exact}");
    }
}
