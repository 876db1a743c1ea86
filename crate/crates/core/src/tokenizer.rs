//! Mean-absolute scaling and uniform-bin quantization of real-valued series
//! into a finite token vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleStat {
    MeanAbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    /// Clip range in scaled space.
    pub lo: f64,
    pub hi: f64,
    /// `vocab_size + 1` strictly increasing edges, `edges[0] = lo`, `edges[N] = hi`.
    pub bin_edges: Vec<f64>,
    pub scale_stat: ScaleStat,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::uniform(512, -15.0, 15.0).expect("default tokenizer is valid")
    }
}

impl TokenizerConfig {
    pub fn uniform(vocab_size: usize, lo: f64, hi: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid(format!("vocab_size must be at least 2, got {vocab_size}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("bad clip range [{lo}, {hi}]")));
        }
        let width = (hi - lo) / vocab_size as f64;
        let mut edges: Vec<f64> = (0..=vocab_size).map(|i| lo + i as f64 * width).collect();
        edges[vocab_size] = hi;
        Self::from_edges(edges)
    }

    pub fn from_edges(bin_edges: Vec<f64>) -> Result<Self> {
        if bin_edges.len() < 3 {
            return Err(Error::invalid("need at least 3 bin edges"));
        }
        if bin_edges.iter().any(|e| !e.is_finite()) || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("bin edges must be finite and strictly increasing"));
        }
        Ok(Self {
            vocab_size: bin_edges.len() - 1,
            lo: bin_edges[0],
            hi: *bin_edges.last().unwrap(),
            bin_edges,
            scale_stat: ScaleStat::MeanAbs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = Self::from_edges(self.bin_edges.clone())?;
        if rebuilt.vocab_size != self.vocab_size || rebuilt.lo != self.lo || rebuilt.hi != self.hi {
            return Err(Error::invalid("tokenizer fields disagree with bin edges"));
        }
        Ok(())
    }

    pub fn bin_width(&self, token: TokenId) -> f64 {
        self.bin_edges[token + 1] - self.bin_edges[token]
    }

    pub fn center(&self, token: TokenId) -> f64 {
        0.5 * (self.bin_edges[token] + self.bin_edges[token + 1])
    }

    /// Token for a value already divided by the scale.
    pub fn token_of_scaled(&self, v: f64) -> TokenId {
        let v = v.clamp(self.lo, self.hi);
        // bins are [e_i, e_{i+1}); the top edge belongs to the last bin
        let above = self.bin_edges.partition_point(|&e| e <= v);
        above.saturating_sub(1).min(self.vocab_size - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub scale: f64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Mean absolute value of the context; 1 when that is zero.
pub fn fit_scale(context: &[f64]) -> Result<f64> {
    if context.is_empty() {
        return Err(Error::invalid("cannot fit a scale on an empty context"));
    }
    if let Some(i) = context.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value at index {i}")));
    }
    let s = context.iter().map(|v| v.abs()).sum::<f64>() / context.len() as f64;
    Ok(if s > 0.0 { s } else { 1.0 })
}

pub fn tokenize(series: &[f64], cfg: &TokenizerConfig, scale: f64) -> Result<TokenSequence> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive and finite, got {scale}")));
    }
    let tokens = series
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x.is_finite() {
                Ok(cfg.token_of_scaled(x / scale))
            } else {
                Err(Error::invalid(format!("non-finite value at index {i}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence { tokens, scale })
}

pub fn detokenize(seq: &TokenSequence, cfg: &TokenizerConfig) -> Result<Vec<f64>> {
    seq.tokens
        .iter()
        .map(|&t| {
            if t < cfg.vocab_size {
                Ok(cfg.center(t) * seq.scale)
            } else {
                Err(Error::invalid(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn scale_examples() {
        assert_eq!(fit_scale(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(fit_scale(&[0.0; 4]).unwrap(), 1.0);
        assert!(fit_scale(&[]).is_err());
    }

    #[test]
    fn half_normal_scale() {
        let xs: Vec<f64> = RngStream::new(2, 0).gaussians(10_000).into_iter().map(|z| 2.0 * z).collect();
        let want = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        let got = fit_scale(&xs).unwrap();
        assert!((got - want).abs() / want < 0.03, "{got} vs {want}");
    }

    #[test]
    fn boundary_and_clipping() {
        let cfg = TokenizerConfig::uniform(4, -2.0, 2.0).unwrap();
        assert_eq!(tokenize(&[0.0], &cfg, 1.0).unwrap().tokens, vec![2]);
        assert_eq!(tokenize(&[2.0, -2.0], &cfg, 1.0).unwrap().tokens, vec![3, 0]);
        let cfg = TokenizerConfig::default();
        assert_eq!(tokenize(&[100.0, -100.0], &cfg, 1.0).unwrap().tokens, vec![511, 0]);
    }

    #[test]
    fn bin_center() {
        let cfg = TokenizerConfig::uniform(2, -1.0, 1.0).unwrap();
        let seq = TokenSequence { tokens: vec![0, 1], scale: 1.0 };
        assert_eq!(detokenize(&seq, &cfg).unwrap(), vec![-0.5, 0.5]);
        let bad = TokenSequence { tokens: vec![2], scale: 1.0 };
        assert!(detokenize(&bad, &cfg).is_err());
    }

    #[test]
    fn errors_name_the_index() {
        let cfg = TokenizerConfig::default();
        let err = tokenize(&[0.0, f64::NAN], &cfg, 1.0).unwrap_err();
        assert!(err.to_string().contains("index 1"));
        assert!(tokenize(&[0.0], &cfg, 0.0).is_err());
    }

    #[test]
    fn token_fixed_point() {
        let cfg = TokenizerConfig::uniform(64, -3.0, 3.0).unwrap();
        let seq = TokenSequence { tokens: (0..64).collect(), scale: 1.7 };
        let back = tokenize(&detokenize(&seq, &cfg).unwrap(), &cfg, 1.7).unwrap();
        assert_eq!(back.tokens, seq.tokens);
    }

    #[test]
    fn roundtrip_error_bound() {
        let cfg = TokenizerConfig::default();
        let mut rng = RngStream::new(7, 0);
        let scale = 0.8;
        for _ in 0..10_000 {
            let x = (rng.uniform() * 30.0 - 15.0) * scale;
            let t = tokenize(&[x], &cfg, scale).unwrap();
            let back = detokenize(&t, &cfg).unwrap()[0];
            assert!((back - x).abs() <= scale * cfg.bin_width(t.tokens[0]) / 2.0 * (1.0 + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, scale in 0.01f64..10.0) {
            let cfg = TokenizerConfig::default();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            let t = tokenize(&[x, y], &cfg, scale).unwrap().tokens;
            prop_assert!(t[0] <= t[1]);
        }

        // powers of two keep x/s exact, so the equivariance is bitwise
        #[test]
        fn scale_equivariant(xs in proptest::collection::vec(-40.0f64..40.0, 1..50), s in 0.1f64..5.0, k in -8i32..8) {
            let cfg = TokenizerConfig::default();
            let alpha = 2f64.powi(k);
            let scaled: Vec<f64> = xs.iter().map(|x| alpha * x).collect();
            prop_assert_eq!(
                tokenize(&scaled, &cfg, alpha * s).unwrap().tokens,
                tokenize(&xs, &cfg, s).unwrap().tokens
            );
        }
    }
}
