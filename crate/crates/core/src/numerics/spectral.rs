use super::{norm_sq, Matrix, RngStream};

const MAX_ITERS: usize = 20_000;
const TOL: f64 = 1e-12;

/// Largest singular value by power iteration on `MᵀM`.
///
/// Starts from a fixed pseudo-random unit vector and stops once the
/// Rayleigh quotient moves by less than `1e-12` relative.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let n = m.cols();
    if n == 0 || m.rows() == 0 || m.max_abs() == 0.0 {
        return 0.0;
    }
    let mut rng = RngStream::new(0x5eed_0f_5e7, 0);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    normalize(&mut v);
    let mut sigma_sq = norm_sq(&m.matvec(&v));
    for _ in 0..MAX_ITERS {
        let mv = m.matvec(&v);
        let mut w = m.tmatvec(&mv);
        if normalize(&mut w) == 0.0 {
            break;
        }
        v = w;
        let next = norm_sq(&m.matvec(&v));
        let delta = (next - sigma_sq).abs();
        sigma_sq = next;
        if delta <= TOL * sigma_sq {
            break;
        }
    }
    sigma_sq.sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm_sq(v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
