use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

/// Compose a stream id from a domain tag and an index.
///
/// Domains keep unrelated consumers (series generation, noise, training
/// batches, forecast sampling, ...) from ever sharing a stream.
pub const fn stream_id(domain: u16, index: u64) -> u64 {
    ((domain as u64) << 48) ^ (index & 0x0000_ffff_ffff_ffff)
}

/// Seeded, splittable random stream.
///
/// Backed by ChaCha20 keyed with the little-endian seed and using
/// `stream_id` as the ChaCha stream, so `(seed, stream_id)` names one fixed
/// sequence on every platform. Gaussians use Box-Muller (pairs, second
/// value cached); integer choices use rejection sampling, never modulo bias.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and another id.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U is in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform index in `0..k`. Panics when `k == 0`.
    pub fn uniform_choice(&mut self, k: usize) -> usize {
        assert!(k > 0, "uniform_choice over an empty range");
        let range = k as u64;
        let zone = u64::MAX - (u64::MAX - range + 1) % range;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % range) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_choice(i + 1);
            items.swap(i, j);
        }
    }
}
