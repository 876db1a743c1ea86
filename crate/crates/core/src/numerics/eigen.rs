use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix.
///
/// `eigenvalues` are sorted descending (exact ties keep their original
/// diagonal order) and column `i` of `eigenvectors` is the unit eigenvector
/// for `eigenvalues[i]`, signed so its largest-magnitude entry is positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.eigenvectors.column(i)
    }

    /// `Γ diag(λ) Γᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let g = self.vector(k);
            for i in 0..n {
                for j in 0..n {
                    out.add_at(i, j, lam * g[i] * g[j]);
                }
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigendecompose(m: &Matrix) -> Result<EigenDecomposition> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let asym = m.asymmetry();
    if asym > 1e-10 {
        return Err(Error::invalid(format!("matrix is not symmetric (relative asymmetry {asym:e})")));
    }
    let n = m.rows();
    let mut a = m.clone();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let norm = a.frobenius_norm();

    let mut converged = n <= 1 || norm == 0.0;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(Error::NoConvergence { iterations: MAX_SWEEPS });
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Once an entry no longer moves either diagonal it is noise.
                let g = 100.0 * apq.abs();
                if sweep > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                rotate(&mut a, &mut v, p, q);
            }
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        converged = off <= 1e-15 * norm;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        let lead = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) })
            .0;
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in col.into_iter().enumerate() {
            vectors.set(i, k, x);
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors: vectors })
}

/// Zero `a[p][q]` with a Givens rotation, accumulating it into `v`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let n = a.rows();
    let apq = a.get(p, q);
    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if theta.is_infinite() {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}
