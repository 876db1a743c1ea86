//! Synthetic series from Gaussian-process priors with randomly composed kernels.
//!
//! A series is produced by drawing `j ~ U{1..J}` kernels (with replacement)
//! from a bank, folding them left to right with random `+`/`×`, and sampling
//! `L·z` where `L` is the jittered Cholesky factor of the Gram matrix on a
//! uniform grid over `[0, 1]`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_psd, stream_id, JitterPolicy, Matrix, RngStream};
use crate::par;

/// Stream domain for per-series generation.
pub const SERIES_DOMAIN: u16 = 1;
/// Stream domain for additive input noise.
pub const NOISE_DOMAIN: u16 = 2;

/// Leaf covariance functions. Positions are normalized grid points in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    DotProduct { c: f64 },
    Rbf { length_scale: f64 },
    Periodic { period: f64, length_scale: f64 },
    RationalQuadratic { alpha: f64, length_scale: f64 },
    White { noise_level: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let valid = match *self {
            KernelSpec::DotProduct { c } => c.is_finite() && c >= 0.0,
            KernelSpec::Rbf { length_scale } => ok(length_scale),
            KernelSpec::Periodic { period, length_scale } => ok(period) && ok(length_scale),
            KernelSpec::RationalQuadratic { alpha, length_scale } => ok(alpha) && ok(length_scale),
            KernelSpec::White { noise_level } => noise_level.is_finite() && noise_level >= 0.0,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kernel parameters: {self}")))
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let d = s - t;
        match *self {
            KernelSpec::DotProduct { c } => c + s * t,
            KernelSpec::Rbf { length_scale } => (-d * d / (2.0 * length_scale * length_scale)).exp(),
            KernelSpec::Periodic { period, length_scale } => {
                let sin = (PI * d.abs() / period).sin();
                (-2.0 * sin * sin / (length_scale * length_scale)).exp()
            }
            KernelSpec::RationalQuadratic { alpha, length_scale } => {
                (1.0 + d * d / (2.0 * alpha * length_scale * length_scale)).powf(-alpha)
            }
            KernelSpec::White { noise_level } => {
                if s == t {
                    noise_level
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::DotProduct { c } => write!(f, "DotProduct(c={c})"),
            KernelSpec::Rbf { length_scale } => write!(f, "RBF(l={length_scale})"),
            KernelSpec::Periodic { period, length_scale } => write!(f, "Periodic(p={period}, l={length_scale})"),
            KernelSpec::RationalQuadratic { alpha, length_scale } => {
                write!(f, "RationalQuadratic(alpha={alpha}, l={length_scale})")
            }
            KernelSpec::White { noise_level } => write!(f, "White(noise={noise_level})"),
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, s: f64, t: f64) -> f64 {
    spec.eval(s, t)
}

/// Binary expression tree over kernel leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CompositeKernel {
    Leaf { kernel: KernelSpec },
    Add { left: Box<CompositeKernel>, right: Box<CompositeKernel> },
    Multiply { left: Box<CompositeKernel>, right: Box<CompositeKernel> },
}

impl CompositeKernel {
    pub fn leaf(kernel: KernelSpec) -> Self {
        CompositeKernel::Leaf { kernel }
    }

    pub fn add(self, other: CompositeKernel) -> Self {
        CompositeKernel::Add { left: Box::new(self), right: Box::new(other) }
    }

    pub fn multiply(self, other: CompositeKernel) -> Self {
        CompositeKernel::Multiply { left: Box::new(self), right: Box::new(other) }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            CompositeKernel::Leaf { kernel } => kernel.eval(s, t),
            CompositeKernel::Add { left, right } => left.eval(s, t) + right.eval(s, t),
            CompositeKernel::Multiply { left, right } => left.eval(s, t) * right.eval(s, t),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            CompositeKernel::Leaf { .. } => 1,
            CompositeKernel::Add { left, right } | CompositeKernel::Multiply { left, right } => {
                left.leaf_count() + right.leaf_count()
            }
        }
    }
}

impl fmt::Display for CompositeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositeKernel::Leaf { kernel } => write!(f, "{kernel}"),
            CompositeKernel::Add { left, right } => write!(f, "({left} + {right})"),
            CompositeKernel::Multiply { left, right } => write!(f, "({left} * {right})"),
        }
    }
}

/// `len` equally spaced points on `[0, 1]`.
pub fn uniform_grid(len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..len).map(|i| i as f64 / (len - 1) as f64).collect(),
    }
}

pub fn gram_matrix(kernel: &CompositeKernel, grid: &[f64]) -> Result<Matrix> {
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("grid points must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("grid must be strictly increasing"));
    }
    let n = grid.len();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(grid[i], grid[j]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    if !g.is_finite() {
        return Err(Error::numeric(format!("non-finite Gram entry for {kernel}")));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Maximum number of kernels composed per series (`J`).
    pub max_kernels: usize,
    pub length: usize,
    /// Rescale each sample to zero mean and unit variance.
    pub standardize: bool,
    pub jitter: JitterPolicy,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { max_kernels: 5, length: 1024, standardize: true, jitter: JitterPolicy::default() }
    }
}

/// Where a series came from; enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesOrigin {
    pub kernel: CompositeKernel,
    pub seed: u64,
    pub stream_id: u64,
    pub max_kernels: usize,
    pub length: usize,
    pub jitter: f64,
    pub standardized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    /// Series as emitted (standardized unless disabled).
    pub values: Vec<f64>,
    /// The untouched GP draw.
    pub raw: Vec<f64>,
    pub origin: SeriesOrigin,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Draw the kernel tree: `j ~ U{1..J}`, `j` leaves with replacement, then a
/// random operator per fold step.
pub fn sample_kernel(bank: &[KernelSpec], max_kernels: usize, rng: &mut RngStream) -> Result<CompositeKernel> {
    if bank.is_empty() {
        return Err(Error::invalid("kernel bank is empty"));
    }
    if max_kernels == 0 {
        return Err(Error::invalid("max_kernels must be at least 1"));
    }
    for k in bank {
        k.validate()?;
    }
    let j = rng.uniform_choice(max_kernels) + 1;
    let picks: Vec<KernelSpec> = (0..j).map(|_| bank[rng.uniform_choice(bank.len())]).collect();
    let mut tree = CompositeKernel::leaf(picks[0]);
    for k in &picks[1..] {
        tree = if rng.uniform_choice(2) == 0 {
            tree.add(CompositeKernel::leaf(*k))
        } else {
            tree.multiply(CompositeKernel::leaf(*k))
        };
    }
    Ok(tree)
}

/// Sample a zero-mean GP path for a fixed kernel tree.
pub fn sample_gp(kernel: &CompositeKernel, length: usize, jitter: JitterPolicy, rng: &mut RngStream) -> Result<(Vec<f64>, f64)> {
    let gram = gram_matrix(kernel, &uniform_grid(length))?;
    let chol = cholesky_psd(&gram, jitter).map_err(|e| Error::GenerationFailure {
        kernel: kernel.to_string(),
        reason: e.to_string(),
    })?;
    let z = rng.gaussians(length);
    Ok((chol.lower.matvec(&z), chol.jitter))
}

pub fn kernelsynth_sample(bank: &[KernelSpec], cfg: &SynthConfig, stream: &mut RngStream) -> Result<TimeSeries> {
    if cfg.length < 2 {
        return Err(Error::invalid(format!("series length must be at least 2, got {}", cfg.length)));
    }
    let kernel = sample_kernel(bank, cfg.max_kernels, stream)?;
    let (raw, jitter) = sample_gp(&kernel, cfg.length, cfg.jitter, stream)?;
    let values = if cfg.standardize { standardize(&raw) } else { raw.clone() };
    Ok(TimeSeries {
        values,
        raw,
        origin: SeriesOrigin {
            kernel,
            seed: stream.seed(),
            stream_id: stream.stream_id(),
            max_kernels: cfg.max_kernels,
            length: cfg.length,
            jitter,
            standardized: cfg.standardize,
        },
    })
}

/// Zero mean, unit (population) variance; constant input is only centered.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        values.iter().map(|v| (v - mean) / sd).collect()
    } else {
        values.iter().map(|v| v - mean).collect()
    }
}

/// Additive i.i.d. `N(0, σ²)` noise. `σ = 0` returns the input unchanged.
pub fn add_noise(values: &[f64], sigma: f64, stream: &mut RngStream) -> Vec<f64> {
    if sigma == 0.0 {
        return values.to_vec();
    }
    values.iter().map(|v| v + sigma * stream.gaussian()).collect()
}

/// A named synthetic dataset: a kernel bank plus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub bank: Vec<KernelSpec>,
    pub max_kernels: usize,
    pub length: usize,
    pub series_count: usize,
    pub standardize: bool,
}

impl DatasetSpec {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            max_kernels: self.max_kernels,
            length: self.length,
            standardize: self.standardize,
            jitter: JitterPolicy::default(),
        }
    }

    /// Generate every series; series `i` always uses stream `(seed, SERIES_DOMAIN:i)`.
    pub fn generate(&self, seed: u64) -> Result<Vec<TimeSeries>> {
        self.generate_range(seed, 0..self.series_count)
    }

    pub fn generate_range(&self, seed: u64, range: std::ops::Range<usize>) -> Result<Vec<TimeSeries>> {
        let cfg = self.synth_config();
        let start = range.start;
        par::map_range(range.len(), |i| {
            let mut rng = RngStream::new(seed, stream_id(SERIES_DOMAIN, (start + i) as u64));
            kernelsynth_sample(&self.bank, &cfg, &mut rng)
        })
        .into_iter()
        .collect()
    }
}

/// The ten single-kernel synthetic datasets (two per pattern family).
///
/// Seasonality periods are expressed as fractions of the series length.
pub fn default_datasets(length: usize, series_count: usize) -> Vec<DatasetSpec> {
    let one = |name: &str, k: KernelSpec| DatasetSpec {
        name: name.to_string(),
        bank: vec![k],
        max_kernels: 1,
        length,
        series_count,
        standardize: true,
    };
    vec![
        one("linear_1", KernelSpec::DotProduct { c: 0.0 }),
        one("linear_2", KernelSpec::DotProduct { c: 1.0 }),
        one("seasonality_1", KernelSpec::Periodic { period: 0.125, length_scale: 1.0 }),
        one("seasonality_2", KernelSpec::Periodic { period: 0.03125, length_scale: 1.0 }),
        one("trend_1", KernelSpec::RationalQuadratic { alpha: 1.0, length_scale: 1.0 }),
        one("trend_2", KernelSpec::RationalQuadratic { alpha: 10.0, length_scale: 1.0 }),
        one("nonlinear_1", KernelSpec::Rbf { length_scale: 0.1 }),
        one("nonlinear_2", KernelSpec::Rbf { length_scale: 1.0 }),
        one("stochastic_1", KernelSpec::White { noise_level: 0.1 }),
        one("stochastic_2", KernelSpec::White { noise_level: 1.0 }),
    ]
}
