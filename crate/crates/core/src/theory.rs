//! Executable checks of the log-linear/attention results: the logit-shift
//! attack on downstream heads, the self-attention Jacobian bound, the
//! optimal low-rank attention matrix and the small-Λ approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention_weights, log_sum_exp, softmax};
use crate::numerics::{dot, norm_sq, spectral_norm, stream_id, sym_eigendecompose, Matrix, RngStream};
use crate::par;
use crate::tokenizer::TokenId;

pub const THEORY_DOMAIN: u16 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub log_z: f64,
    pub z: f64,
}

/// `Z = Σ_i exp(⟨encoding, embed_i⟩)` with max-subtraction.
pub fn partition_function(encoding: &[f64], embed: &Matrix) -> Result<Partition> {
    if encoding.len() != embed.cols() {
        return Err(Error::invalid(format!("encoding has {} entries, embeddings {}", encoding.len(), embed.cols())));
    }
    if encoding.iter().any(|v| !v.is_finite()) || !embed.is_finite() {
        return Err(Error::invalid("non-finite input to partition function"));
    }
    let log_z = log_sum_exp(&embed.matvec(encoding));
    let z = log_z.exp();
    if !z.is_finite() {
        return Err(Error::numeric(format!("partition function overflows (log Z = {log_z})")));
    }
    Ok(Partition { log_z, z })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropyPartition {
    /// `min_c Z(c) / max_c Z(c)` over the probe set.
    pub value: f64,
    pub degenerate: bool,
    pub log_z: Vec<f64>,
}

/// Partition-function isotropy with the eigenvectors of `ΨᵀΨ` as probes:
/// `Z(c) = Σ_i exp(cᵀψ_i)`, `I = min Z / max Z`, evaluated in log space.
pub fn isotropy_partition(psi: &Matrix) -> Result<IsotropyPartition> {
    if psi.rows() < 2 {
        return Err(Error::invalid("isotropy needs at least two embeddings"));
    }
    if psi.max_abs() == 0.0 {
        return Ok(IsotropyPartition { value: 1.0, degenerate: true, log_z: vec![] });
    }
    let eig = sym_eigendecompose(&psi.gram())?;
    // eigenvector signs are arbitrary; orient each probe toward the embedding sum so the
    // probe set rotates with the data
    let total = psi.column_means();
    let log_z: Vec<f64> = (0..psi.cols())
        .map(|i| {
            let mut u = eig.vector(i);
            if dot(&u, &total) < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
            log_sum_exp(&psi.matvec(&u))
        })
        .collect();
    let lo = log_z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = log_z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(IsotropyPartition { value: (lo - hi).exp(), degenerate: false, log_z })
}

/// `f(z) = Σ_i a_i ReLU(z_i − b_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamHead {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl DownstreamHead {
    pub fn sample(n: usize, rng: &mut RngStream) -> Self {
        Self { a: rng.gaussians(n), b: rng.gaussians(n) }
    }
}

/// Value of the head and its active set `{i : z_i > b_i}`.
pub fn downstream_value(z: &[f64], head: &DownstreamHead) -> Result<(f64, Vec<usize>)> {
    if z.len() != head.a.len() || z.len() != head.b.len() {
        return Err(Error::invalid("logit and head lengths differ"));
    }
    let mut total = 0.0;
    let mut active = Vec::new();
    for (i, ((&zi, &ai), &bi)) in z.iter().zip(&head.a).zip(&head.b).enumerate() {
        if zi > bi {
            active.push(i);
            total += ai * (zi - bi);
        }
    }
    Ok((total, active))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub tau: f64,
    pub max_total_variation: f64,
    pub max_prob_diff: f64,
    pub loss_diff: Option<f64>,
    pub shifted_value_zero: bool,
    /// `max_j (ẑ_j − b_j)` over every position; at most −1 by construction.
    pub max_relu_argument: f64,
    pub passed: bool,
}

/// Shift every logit vector by `τ = (min_j b_j − max z) − 1`.
///
/// The shifted logits give the same predictive distributions (and the same
/// cross-entropy when `targets` is given), while every ReLU of the head is
/// inactive, so the downstream value is exactly 0.
pub fn theorem1_shift(
    logits: &[Vec<f64>],
    targets: Option<&[TokenId]>,
    head: &DownstreamHead,
) -> Result<(Vec<Vec<f64>>, ShiftRecord)> {
    if logits.is_empty() {
        return Err(Error::invalid("no logit vectors"));
    }
    if logits.iter().flatten().chain(&head.b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits or thresholds"));
    }
    let max_z = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_b = head.b.iter().cloned().fold(f64::INFINITY, f64::min);
    let tau = (min_b - max_z) - 1.0;
    let shifted: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|v| v + tau).collect()).collect();

    let mut max_tv: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    let mut all_zero = true;
    let mut max_arg = f64::NEG_INFINITY;
    for (z, zs) in logits.iter().zip(&shifted) {
        let (p, q) = (softmax(z), softmax(zs));
        let tv = 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
        max_tv = max_tv.max(tv);
        max_diff = max_diff.max(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let (value, active) = downstream_value(zs, head)?;
        all_zero &= value == 0.0 && active.is_empty();
        for (v, b) in zs.iter().zip(&head.b) {
            max_arg = max_arg.max(v - b);
        }
    }
    let loss_diff = match targets {
        Some(t) => {
            let a = crate::model::loss_from_logits(logits, t)?;
            let b = crate::model::loss_from_logits(&shifted, t)?;
            Some((a - b).abs())
        }
        None => None,
    };
    let passed = max_tv <= 1e-12 && loss_diff.is_none_or(|d| d <= 1e-12) && all_zero && max_arg < 0.0;
    let record = ShiftRecord {
        tau,
        max_total_variation: max_tv,
        max_prob_diff: max_diff,
        loss_diff,
        shifted_value_zero: all_zero,
        max_relu_argument: max_arg,
        passed,
    };
    Ok((shifted, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub d: usize,
    pub lambda_norm: f64,
    pub main_term: f64,
    pub residual: f64,
    /// `main + Δ + n`, the form carried through the full derivation.
    pub bound: f64,
    /// `main + Δ`, without the additive `n`.
    pub main_text_bound: f64,
    pub measured: f64,
    pub attention: Matrix,
    pub margin: f64,
    pub main_text_margin: f64,
}

/// Central-difference Jacobian of a map `R^{n×D} → R^{n×D}`, both sides
/// vectorized row-major. Columns are computed in parallel.
pub fn jacobian_fd_of<F>(psi: &Matrix, h: f64, f: F) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix> + Sync,
{
    let size = psi.rows() * psi.cols();
    let cols = par::map_range(size, |c| -> Result<Vec<f64>> {
        let mut plus = psi.clone();
        let mut minus = psi.clone();
        plus.data_mut()[c] += h;
        minus.data_mut()[c] -= h;
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        Ok(fp.data().iter().zip(fm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    });
    let mut j = Matrix::zeros(size, size);
    for (c, col) in cols.into_iter().enumerate() {
        for (r, v) in col?.into_iter().enumerate() {
            j.set(r, c, v);
        }
    }
    if !j.is_finite() {
        return Err(Error::numeric("finite-difference Jacobian is not finite"));
    }
    Ok(j)
}

pub fn fd_step(psi: &Matrix) -> f64 {
    1e-6 * (1.0 + psi.max_abs())
}

/// Finite-difference Jacobian of unmasked `g(Ψ) = softmax(ΨΛΨᵀ)Ψ`.
pub fn jacobian_fd(psi: &Matrix, lambda: &Matrix) -> Result<Matrix> {
    jacobian_fd_with_step(psi, lambda, fd_step(psi))
}

pub fn jacobian_fd_with_step(psi: &Matrix, lambda: &Matrix, h: f64) -> Result<Matrix> {
    jacobian_fd_of(psi, h, |x| Ok(attention_weights(x, lambda, false)?.matmul(x)))
}

/// Closed-form Jacobian of unmasked attention:
/// `∂g_i/∂ψ_k = p_ik I + δ_ik ΨᵀQⁱΨΛᵀ + (ΨᵀQⁱ)_{:,k} ψ_iᵀΛ`
/// with `Qⁱ = diag(p_i) − p_i p_iᵀ`.
pub fn jacobian_analytic(psi: &Matrix, lambda: &Matrix) -> Result<Matrix> {
    let (n, d) = (psi.rows(), psi.cols());
    let p = attention_weights(psi, lambda, false)?;
    let psi_lt = psi.matmul_transposed(lambda);
    let mut j = Matrix::zeros(n * d, n * d);
    for i in 0..n {
        let pi = p.row(i);
        let mut q = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                q.set(a, b, if a == b { pi[a] } else { 0.0 } - pi[a] * pi[b]);
            }
        }
        let ptq = psi.transpose().matmul(&q); // D×n
        let diag_block = ptq.matmul(&psi_lt); // D×D
        let row_term = lambda.tmatvec(psi.row(i)); // Λᵀψ_i, so (row_term)ᵀ = ψ_iᵀΛ
        for k in 0..n {
            for a in 0..d {
                for b in 0..d {
                    let mut v = ptq.get(a, k) * row_term[b];
                    if a == b {
                        v += pi[k];
                    }
                    if i == k {
                        v += diag_block.get(a, b);
                    }
                    j.set(i * d + a, k * d + b, v);
                }
            }
        }
    }
    Ok(j)
}

/// Bound terms from the attention weights alone.
pub fn lemma1_terms(psi: &Matrix, lambda: &Matrix) -> Result<(Matrix, f64, f64, f64)> {
    let n = psi.rows();
    let p = attention_weights(psi, lambda, false)?;
    let lnorm = spectral_norm(lambda);
    let mu = p.matmul(psi);
    let mut main = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        main += (p.get(i, i) + 0.5) * dist_sq(psi.row(i), mu.row(i));
        for j in 0..n {
            if j != i {
                off += p.get(i, j) * dist_sq(psi.row(j), mu.row(i));
            }
        }
    }
    let energy: f64 = (0..n).map(|j| norm_sq(psi.row(j))).sum();
    Ok((p, lnorm, lnorm * main, lnorm * off + 0.5 * lnorm * energy))
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluate the Jacobian bound and compare with the measured spectral norm
/// of the finite-difference Jacobian.
pub fn lemma1_bound(psi: &Matrix, lambda: &Matrix) -> Result<BoundReport> {
    let (p, lnorm, main, residual) = lemma1_terms(psi, lambda)?;
    let n = psi.rows();
    let measured = spectral_norm(&jacobian_fd(psi, lambda)?);
    let bound = main + residual + n as f64;
    Ok(BoundReport {
        n,
        d: psi.cols(),
        lambda_norm: lnorm,
        main_term: main,
        residual,
        bound,
        main_text_bound: main + residual,
        measured,
        attention: p,
        margin: bound - measured,
        main_text_margin: main + residual - measured,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolution {
    pub lambda: Matrix,
    pub objective: f64,
    /// `Σ_{q>m} λ_q` of the centered `ΨᵀΨ`.
    pub trailing_sum: f64,
    pub eigenvalues: Vec<f64>,
    pub m: usize,
    pub matches: bool,
}

/// `Σ_i |ψ_i − ΨᵀΨΛψ_i|²` for already-centered `Ψ`.
pub fn theorem2_objective(centered: &Matrix, lambda: &Matrix) -> f64 {
    let c = centered.gram();
    let cl = c.matmul(lambda);
    (0..centered.rows())
        .map(|i| {
            let row = centered.row(i);
            dist_sq(row, &cl.matvec(row))
        })
        .sum()
}

/// `Λ* = Σ_{i≤m} γ_iγ_iᵀ / λ_i` from the eigenpairs of the centered `ΨᵀΨ`.
pub fn theorem2_optimal_lambda(psi: &Matrix, m: usize) -> Result<LambdaSolution> {
    let d = psi.cols();
    if m == 0 || m > d {
        return Err(Error::invalid(format!("m = {m} must lie in 1..={d}")));
    }
    let centered = psi.centered();
    let eig = sym_eigendecompose(&centered.gram())?;
    let l1 = eig.eigenvalues[0];
    let lm = eig.eigenvalues[m - 1];
    if !(lm > 1e-12 * l1) || l1 <= 0.0 {
        return Err(Error::RankDeficient { m, lambda_m: lm, threshold: 1e-12 * l1 });
    }
    let mut lambda = Matrix::zeros(d, d);
    for i in 0..m {
        let g = eig.vector(i);
        let w = 1.0 / eig.eigenvalues[i];
        for a in 0..d {
            for b in 0..d {
                lambda.add_at(a, b, w * g[a] * g[b]);
            }
        }
    }
    let objective = theorem2_objective(&centered, &lambda);
    let trailing_sum: f64 = eig.eigenvalues[m..].iter().map(|v| v.max(0.0)).sum();
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let matches = (objective - trailing_sum).abs() <= 1e-8 * trailing_sum + 1e-12 * total;
    Ok(LambdaSolution { lambda, objective, trailing_sum, eigenvalues: eig.eigenvalues, m, matches })
}

/// Projected gradient descent over symmetric rank-`m` matrices, used as a
/// competitor to the closed form. Returns the best objective seen.
pub fn theorem2_descent(psi: &Matrix, m: usize, start: &Matrix, iterations: usize) -> Result<f64> {
    let centered = psi.centered();
    let c = centered.gram();
    let l1 = spectral_norm(&c);
    if l1 == 0.0 {
        return Ok(theorem2_objective(&centered, start));
    }
    let step = 1.0 / (2.0 * l1.powi(3));
    let c2 = c.matmul(&c);
    let mut lambda = project_rank(start, m)?;
    let mut best = theorem2_objective(&centered, &lambda);
    for _ in 0..iterations {
        // ∇ = −2C(C − CΛC)
        let grad = c2.sub(&c2.matmul(&lambda).matmul(&c)).scale(-2.0);
        lambda = project_rank(&lambda.sub(&grad.scale(step)), m)?;
        best = best.min(theorem2_objective(&centered, &lambda));
    }
    Ok(best)
}

fn project_rank(a: &Matrix, m: usize) -> Result<Matrix> {
    let sym = a.add(&a.transpose()).scale(0.5);
    let eig = sym_eigendecompose(&sym)?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].abs().total_cmp(&eig.eigenvalues[x].abs()));
    let d = a.rows();
    let mut out = Matrix::zeros(d, d);
    for &i in order.iter().take(m) {
        let g = eig.vector(i);
        for r in 0..d {
            for s in 0..d {
                out.add_at(r, s, eig.eigenvalues[i] * g[r] * g[s]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub rho: f64,
    /// `max |p_ij − (1/n + ψ_iᵀΛψ_j/n)|`.
    pub max_weight_error: f64,
    /// `|Σ|ψ_i − Ψᵀp_i|² − Σ|ψ_i − ΨᵀΨΛψ_i|²|`.
    pub substitution_error: f64,
    /// Same with the first-order `1/n` kept: `Σ|ψ_i − ΨᵀΨΛψ_i/n|²`.
    pub substitution_error_scaled: f64,
}

pub const DEFAULT_RHOS: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];

/// Sweep `Λ = ρ·direction/‖direction‖_F` and measure the linearized
/// attention weights and the resulting objective substitution.
pub fn small_lambda_approx_check(psi: &Matrix, direction: &Matrix, rhos: &[f64]) -> Result<Vec<ApproxRow>> {
    let n = psi.rows();
    let fro = direction.frobenius_norm();
    let c = psi.gram();
    rhos.iter()
        .map(|&rho| {
            let lambda = if fro > 0.0 { direction.scale(rho / fro) } else { direction.clone() };
            let p = attention_weights(psi, &lambda, false)?;
            let scores = psi.matmul(&lambda).matmul_transposed(psi);
            let mut max_err: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let approx = 1.0 / n as f64 + scores.get(i, j) / n as f64;
                    max_err = max_err.max((p.get(i, j) - approx).abs());
                }
            }
            let mu = p.matmul(psi);
            let cl = c.matmul(&lambda);
            let (mut exact, mut sub, mut sub_scaled) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let row = psi.row(i);
                let lin = cl.matvec(row);
                exact += dist_sq(row, mu.row(i));
                sub += dist_sq(row, &lin);
                let scaled: Vec<f64> = lin.iter().map(|v| v / n as f64).collect();
                sub_scaled += dist_sq(row, &scaled);
            }
            Ok(ApproxRow {
                rho,
                max_weight_error: max_err,
                substitution_error: (exact - sub).abs(),
                substitution_error_scaled: (exact - sub_scaled).abs(),
            })
        })
        .collect()
}

/// Random instance for the bound check: `n ∈ 1..=8`, `D ∈ 1..=6`, standard
/// normal `Ψ`, `Λ` rescaled to a spectral norm uniform in `(0, 2]`.
pub fn random_bound_instance(rng: &mut RngStream) -> (Matrix, Matrix) {
    let n = 1 + rng.uniform_choice(8);
    let d = 1 + rng.uniform_choice(6);
    let psi = Matrix::from_raw(n, d, rng.gaussians(n * d));
    let raw = Matrix::from_raw(d, d, rng.gaussians(d * d));
    let target = 2.0 * (1.0 - rng.uniform());
    let s = spectral_norm(&raw);
    let lambda = if s > 0.0 { raw.scale(target / s) } else { raw };
    (psi, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub name: String,
    pub seed: u64,
    pub instances: usize,
    pub failures: usize,
    /// Worst margin (bound suites) or worst excess (optimality suites).
    pub worst: f64,
    pub passed: bool,
    pub detail: serde_json::Value,
}

/// Bound check over `count` random instances; passes when every margin is
/// at least `−1e-6`.
pub fn lemma1_suite(count: usize, seed: u64) -> Result<(SuiteSummary, Vec<BoundReport>)> {
    let reports = par::map_range(count, |i| {
        let mut rng = RngStream::new(seed, stream_id(THEORY_DOMAIN, i as u64));
        let (psi, lambda) = random_bound_instance(&mut rng);
        lemma1_bound(&psi, &lambda)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let failures = reports.iter().filter(|r| r.margin < -1e-6).count();
    let main_text_failures = reports.iter().filter(|r| r.main_text_margin < -1e-6).count();
    let worst = reports.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    let summary = SuiteSummary {
        name: "lemma1_bound".into(),
        seed,
        instances: count,
        failures,
        worst,
        passed: failures == 0,
        detail: serde_json::json!({ "main_text_failures": main_text_failures }),
    };
    Ok((summary, reports))
}

/// Closed-form optimality over `count` random centered instances (n = 20,
/// D = 5, m = 2) with `starts` descent competitors each.
pub fn theorem2_suite(count: usize, starts: usize, iterations: usize, seed: u64) -> Result<SuiteSummary> {
    let results = par::map_range(count, |i| -> Result<(bool, f64)> {
        let mut rng = RngStream::new(seed, stream_id(THEORY_DOMAIN + 1, i as u64));
        let psi = Matrix::from_raw(20, 5, rng.gaussians(100)).centered();
        let sol = theorem2_optimal_lambda(&psi, 2)?;
        let mut excess = f64::NEG_INFINITY;
        for _ in 0..starts {
            let start = Matrix::from_raw(5, 5, rng.gaussians(25)).scale(1.0 / sol.eigenvalues[0]);
            let best = theorem2_descent(&psi, 2, &start, iterations)?;
            excess = excess.max(sol.objective - best);
        }
        Ok((sol.matches, excess))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mismatches = results.iter().filter(|r| !r.0).count();
    let beaten = results.iter().filter(|r| r.1 > 1e-6).count();
    let worst = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(SuiteSummary {
        name: "theorem2_optimal_lambda".into(),
        seed,
        instances: count,
        failures: mismatches + beaten,
        worst,
        passed: mismatches == 0 && beaten == 0,
        detail: serde_json::json!({ "closed_form_mismatches": mismatches, "descent_improvements": beaten, "starts": starts }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Error-free `a + b` as a (hi, lo) pair.
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
        Matrix::new(r, c, rng.gaussians(r * c)).unwrap()
    }

    #[test]
    fn partition_examples() {
        let embed = Matrix::new(5, 2, vec![1.0; 10]).unwrap();
        assert!((partition_function(&[0.0, 0.0], &embed).unwrap().z - 5.0).abs() < 1e-14);
        let two = Matrix::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
        assert!((partition_function(&[1.0], &two).unwrap().z - 4.0).abs() < 1e-14);
        let big = Matrix::from_rows(&[vec![1000.0]]).unwrap();
        assert!(partition_function(&[1.0], &big).unwrap_err().is_numeric());
    }

    #[test]
    fn partition_against_compensated_sum() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let embed = rand_matrix(300, 8, &mut rng);
            let enc = rng.gaussians(8);
            let logits: Vec<f64> = (0..300).map(|i| embed.row(i).iter().zip(&enc).map(|(a, b)| a * b).sum()).collect();
            let (mut hi, mut lo) = (0.0, 0.0);
            for z in &logits {
                let (s, e) = two_sum(hi, z.exp());
                hi = s;
                lo += e;
            }
            let oracle = hi + lo;
            let got = partition_function(&enc, &embed).unwrap().z;
            assert!((got - oracle).abs() <= 1e-12 * oracle);
        }
    }

    #[test]
    fn isotropy_cross_polytope_and_single_direction() {
        let rows: Vec<Vec<f64>> = (0..3)
            .flat_map(|i| {
                let mut p = vec![0.0; 3];
                p[i] = 1.0;
                let m: Vec<f64> = p.iter().map(|v| -v).collect();
                [p, m]
            })
            .collect();
        let cp = isotropy_partition(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((cp.value - 1.0).abs() < 1e-15);

        // all rows v = (3, 4): probes v/|v| and its orthogonal complement
        let v = Matrix::from_rows(&vec![vec![3.0, 4.0]; 4]).unwrap();
        let got = isotropy_partition(&v).unwrap().value;
        let want = 4.0 / (4.0 * 5f64.exp());
        assert!((got - want).abs() < 1e-12 * want);
        assert!(got < 1.0);

        let zero = isotropy_partition(&Matrix::zeros(3, 2)).unwrap();
        assert!(zero.degenerate && zero.value == 1.0);
    }

    #[test]
    fn isotropy_rotation_invariant() {
        let mut rng = RngStream::new(4, 0);
        let psi = rand_matrix(30, 4, &mut rng).scale(0.7);
        // random orthogonal matrix from an eigen-decomposition
        let a = rand_matrix(4, 4, &mut rng);
        let q = sym_eigendecompose(&a.add(&a.transpose())).unwrap().eigenvectors;
        let base = isotropy_partition(&psi).unwrap().value;
        let rotated = isotropy_partition(&psi.matmul(&q)).unwrap().value;
        assert!((base - rotated).abs() < 1e-10, "{base} vs {rotated}");
        assert!(base > 0.0 && base <= 1.0);
    }

    #[test]
    fn downstream_examples() {
        let head = DownstreamHead { a: vec![1.0, -2.0], b: vec![0.0, 0.0] };
        assert_eq!(downstream_value(&[3.0, 1.0], &head).unwrap(), (1.0, vec![0, 1]));
        assert_eq!(downstream_value(&[-1.0, -1.0], &head).unwrap(), (0.0, vec![]));
        let mut rng = RngStream::new(5, 0);
        for _ in 0..50 {
            let h = DownstreamHead::sample(10, &mut rng);
            let z = rng.gaussians(10);
            let mut brute = 0.0;
            for i in 0..10 {
                brute += h.a[i] * (z[i] - h.b[i]).max(0.0);
            }
            assert!((downstream_value(&z, &h).unwrap().0 - brute).abs() <= 1e-14);
        }
    }

    #[test]
    fn shift_example() {
        let head = DownstreamHead { a: vec![1.0, 1.0], b: vec![0.0, 0.0] };
        let (shifted, rec) = theorem1_shift(&[vec![0.0, 1.0]], Some(&[1]), &head).unwrap();
        assert_eq!(rec.tau, -2.0);
        assert_eq!(shifted, vec![vec![-2.0, -1.0]]);
        assert!(rec.passed && rec.shifted_value_zero);
        assert!(rec.max_relu_argument <= -1.0);
        assert!(theorem1_shift(&[vec![f64::NAN, 1.0]], None, &head).is_err());
    }

    #[test]
    fn fd_matches_linear_kronecker() {
        let mut rng = RngStream::new(6, 0);
        let (n, d) = (4, 3);
        let w = rand_matrix(n, n, &mut rng);
        let psi = rand_matrix(n, d, &mut rng);
        let j = jacobian_fd_of(&psi, fd_step(&psi), |x| Ok(w.matmul(x))).unwrap();
        for i in 0..n {
            for a in 0..d {
                for k in 0..n {
                    for b in 0..d {
                        let want = if a == b { w.get(i, k) } else { 0.0 };
                        assert!((j.get(i * d + a, k * d + b) - want).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn analytic_jacobian_matches_fd() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..10 {
            let (psi, lambda) = random_bound_instance(&mut rng);
            let fd = jacobian_fd(&psi, &lambda).unwrap();
            let an = jacobian_analytic(&psi, &lambda).unwrap();
            assert!(fd.sub(&an).max_abs() <= 1e-6 * (1.0 + an.max_abs()));
        }
    }

    #[test]
    fn fd_richardson_ratio() {
        let mut rng = RngStream::new(8, 0);
        let psi = rand_matrix(3, 2, &mut rng);
        let lambda = rand_matrix(2, 2, &mut rng).scale(0.5);
        let exact = jacobian_analytic(&psi, &lambda).unwrap();
        let h = 2e-2;
        let e1 = jacobian_fd_with_step(&psi, &lambda, h).unwrap().sub(&exact).frobenius_norm();
        let e2 = jacobian_fd_with_step(&psi, &lambda, h / 2.0).unwrap().sub(&exact).frobenius_norm();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() <= 1.2, "ratio {ratio}");
    }

    #[test]
    fn zero_input_is_mean_pooling() {
        let (n, d) = (3, 2);
        let psi = Matrix::zeros(n, d);
        let lambda = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let j = jacobian_fd(&psi, &lambda).unwrap();
        for r in 0..n * d {
            for c in 0..n * d {
                let want = if r % d == c % d { 1.0 / n as f64 } else { 0.0 };
                assert!((j.get(r, c) - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn bound_trivial_cases() {
        let psi = Matrix::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let r = lemma1_bound(&psi, &Matrix::identity(2)).unwrap();
        assert!((r.measured - 1.0).abs() < 1e-8);
        assert!(r.margin >= 0.0);
        let mut rng = RngStream::new(9, 0);
        let psi = rand_matrix(5, 3, &mut rng);
        let r = lemma1_bound(&psi, &Matrix::zeros(3, 3)).unwrap();
        assert!(r.attention.data().iter().all(|p| (p - 0.2).abs() < 1e-15));
        assert!((r.measured - 1.0).abs() < 1e-8);
        assert!(r.margin >= 0.0);
    }

    #[test]
    fn theorem2_diagonal_example() {
        // centered rows with ΨᵀΨ = diag(4, 1)
        let psi = Matrix::from_rows(&[vec![2f64.sqrt(), 0.0], vec![-(2f64.sqrt()), 0.0], vec![0.0, 0.5f64.sqrt()], vec![0.0, -(0.5f64.sqrt())]]).unwrap();
        let sol = theorem2_optimal_lambda(&psi, 1).unwrap();
        let want = Matrix::from_rows(&[vec![0.25, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(sol.lambda.sub(&want).max_abs() < 1e-14);
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert!(sol.matches);
        let full = theorem2_optimal_lambda(&psi, 2).unwrap();
        assert!(full.objective.abs() < 1e-10);
    }

    #[test]
    fn theorem2_rank_deficient() {
        let psi = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert!(matches!(theorem2_optimal_lambda(&psi, 2), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn theorem2_beats_descent() {
        let s = theorem2_suite(3, 5, 300, 1).unwrap();
        assert!(s.passed, "{s:?}");
    }

    #[test]
    fn small_lambda_sweep() {
        let mut rng = RngStream::new(10, 0);
        let psi = rand_matrix(6, 3, &mut rng).centered();
        let dir = rand_matrix(3, 3, &mut rng);
        let rows = small_lambda_approx_check(&psi, &dir, &DEFAULT_RHOS).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].max_weight_error * 2.0 <= w[0].max_weight_error);
            assert!(w[1].substitution_error * 2.0 <= w[0].substitution_error);
        }
        let zero = small_lambda_approx_check(&psi, &Matrix::zeros(3, 3), &[0.0]).unwrap();
        assert!(zero[0].max_weight_error < 1e-15);
    }

    #[test]
    fn centering_reduces_substitution_error() {
        let mut rng = RngStream::new(11, 0);
        let mut wins = 0;
        for _ in 0..50 {
            let psi = rand_matrix(8, 4, &mut rng);
            let dir = rand_matrix(4, 4, &mut rng);
            let raw = small_lambda_approx_check(&psi, &dir, &[1e-2]).unwrap()[0];
            let cen = small_lambda_approx_check(&psi.centered(), &dir, &[1e-2]).unwrap()[0];
            if cen.substitution_error < raw.substitution_error {
                wins += 1;
            }
        }
        assert!(wins >= 45, "{wins}");
    }
}
