use serde::{Deserialize, Serialize};

use super::{sym_eigendecompose, Matrix};
use crate::error::{Error, Result};
use crate::par;

const COV_CHUNK: usize = 512;

/// Principal components of a data matrix (one observation per row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Columns are principal directions, ordered by `eigenvalues`.
    pub components: Matrix,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Per-component share of total variance. All zeros when the data has
    /// no variance at all.
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    /// Partial sums `r_m` of the explained ratio, `m = 1..=D`.
    pub fn cumulative_ratio(&self) -> Vec<f64> {
        self.explained_ratio
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.max(0.0)).sum()
    }

    /// Coordinates of each row of `a` in the top `m` components (zero-padded
    /// when `m` exceeds the dimension).
    pub fn project(&self, a: &Matrix, m: usize) -> Matrix {
        let d = self.mean.len();
        let mut out = Matrix::zeros(a.rows(), m);
        for i in 0..a.rows() {
            let centered: Vec<f64> = a.row(i).iter().zip(&self.mean).map(|(x, mu)| x - mu).collect();
            for k in 0..m.min(d) {
                let v: f64 = (0..d).map(|r| centered[r] * self.components.get(r, k)).sum();
                out.set(i, k, v);
            }
        }
        out
    }
}

/// Sample covariance (`1/(n−1)` normalization) of mean-centered rows.
pub(crate) fn covariance(a: &Matrix, mean: &[f64]) -> Matrix {
    let d = a.cols();
    let partials = par::map_chunks(a.rows(), COV_CHUNK, |range| {
        let mut acc = vec![0.0; d * d];
        let mut c = vec![0.0; d];
        for i in range {
            for ((ci, x), mu) in c.iter_mut().zip(a.row(i)).zip(mean) {
                *ci = x - mu;
            }
            for p in 0..d {
                let cp = c[p];
                for q in p..d {
                    acc[p * d + q] += cp * c[q];
                }
            }
        }
        acc
    });
    let mut cov = vec![0.0; d * d];
    for part in partials {
        cov.iter_mut().zip(part).for_each(|(c, p)| *c += p);
    }
    let denom = (a.rows() - 1) as f64;
    let mut out = Matrix::zeros(d, d);
    for p in 0..d {
        for q in p..d {
            let v = cov[p * d + q] / denom;
            out.set(p, q, v);
            out.set(q, p, v);
        }
    }
    out
}

pub fn pca(a: &Matrix) -> Result<Pca> {
    if a.rows() < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 rows, got {}", a.rows())));
    }
    let mean = a.column_means();
    let cov = covariance(a, &mean);
    let eig = sym_eigendecompose(&cov)?;
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let explained_ratio = if total > 0.0 {
        clipped.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; clipped.len()]
    };
    Ok(Pca { mean, components: eig.eigenvectors, eigenvalues: eig.eigenvalues, explained_ratio })
}
