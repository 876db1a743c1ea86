use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Diagonal jitter escalation used when a Gram matrix is only numerically PSD.
///
/// The first attempt uses no jitter; retries start at `initial_factor ·
/// mean(diag)` and multiply by `growth` each time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial_factor: f64,
    pub growth: f64,
    pub max_attempts: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { initial_factor: 1e-9, growth: 10.0, max_attempts: 6 }
    }
}

#[derive(Debug, Clone)]
pub struct Cholesky {
    /// Lower-triangular factor with `L·Lᵀ = M + jitter·I`.
    pub lower: Matrix,
    pub jitter: f64,
}

pub fn cholesky_psd(m: &Matrix, policy: JitterPolicy) -> Result<Cholesky> {
    if !m.is_square() {
        return Err(Error::invalid("cholesky needs a square matrix"));
    }
    if m.asymmetry() > 1e-10 {
        return Err(Error::invalid("cholesky needs a symmetric matrix"));
    }
    let n = m.rows();
    if let Some(l) = factor(m, 0.0) {
        return Ok(Cholesky { lower: l, jitter: 0.0 });
    }
    let mean_diag = if n == 0 { 0.0 } else { m.trace() / n as f64 };
    let base = if mean_diag.is_finite() && mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = policy.initial_factor * base;
    for _ in 0..policy.max_attempts {
        if let Some(l) = factor(m, jitter) {
            return Ok(Cholesky { lower: l, jitter });
        }
        jitter *= policy.growth;
    }
    Err(Error::NotPositiveSemidefinite {
        attempts: policy.max_attempts,
        last_jitter: jitter / policy.growth,
    })
}

fn factor(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let d = m.get(j, j) + jitter - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let s: f64 = l.row(i)[..j].iter().zip(&l.row(j)[..j]).map(|(a, b)| a * b).sum();
            l.set(i, j, (m.get(i, j) - s) / djj);
        }
    }
    Some(l)
}
