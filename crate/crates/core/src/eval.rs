//! Forecast evaluation: NMSE, a naive baseline, and seeded sweeps over
//! context length and input noise joined with isotropy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isotropy::{analyze, AnalyzeConfig};
use crate::kernelsynth::{add_noise, DatasetSpec, NOISE_DOMAIN};
use crate::model::{dump_embeddings, forecast, LayerSelector, ModelParams, Window, FORECAST_DOMAIN};
use crate::numerics::{stream_id, RngStream};
use crate::par;
use crate::tokenizer::{fit_scale, tokenize, TokenizerConfig};

pub const ORIGIN_DOMAIN: u16 = 40;
pub const EVAL_DATA_DOMAIN: u16 = 41;

/// `Σ(pred − truth)² / Σ truth²`.
pub fn nmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!("nmse needs equal non-empty lengths, got {} and {}", pred.len(), truth.len())));
    }
    let (num, den) = pred
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(n, d), (p, t)| (n + (p - t) * (p - t), d + t * t));
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nmse of an all-zero target".into()));
    }
    Ok(num / den)
}

/// Repeat the last context value `horizon` times.
pub fn naive_baseline(context: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *context.last().ok_or_else(|| Error::invalid("empty context"))?;
    Ok(vec![last; horizon])
}

/// Slide a `context_len + horizon` window over a series with the given
/// stride; each window is tokenized with the scale of its own context.
pub fn windows_from_series(
    values: &[f64],
    context_len: usize,
    horizon: usize,
    stride: usize,
    tokenizer: &TokenizerConfig,
) -> Result<Vec<Window>> {
    if context_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::invalid("context, horizon and stride must be positive"));
    }
    let span = context_len + horizon;
    let mut out = Vec::new();
    let mut start = 0;
    while start + span <= values.len() {
        let w = &values[start..start + span];
        let scale = fit_scale(&w[..context_len])?;
        out.push(Window { tokens: tokenize(w, tokenizer, scale)?.tokens, context_len });
        start += stride;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    ContextLength,
    NoiseSigma,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::ContextLength => "context_length",
            SweepVariable::NoiseSigma => "noise_sigma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    pub datasets: Vec<DatasetSpec>,
    /// Context length for noise sweeps.
    pub context_len: usize,
    /// Noise level for context-length sweeps.
    pub noise_sigma: f64,
    pub horizon: usize,
    pub sample_count: usize,
    pub windows_per_seed: usize,
    pub seeds: Vec<u64>,
    pub analyze: AnalyzeConfig,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::invalid("a sweep needs at least two values"));
        }
        for &v in &self.values {
            let ok = match self.variable {
                SweepVariable::ContextLength => v >= 2.0 && v.fract() == 0.0,
                SweepVariable::NoiseSigma => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!("invalid {} value {v}", self.variable.name())));
            }
        }
        if self.datasets.is_empty() || self.seeds.is_empty() || self.windows_per_seed == 0 {
            return Err(Error::invalid("sweep needs datasets, seeds and windows"));
        }
        if self.horizon == 0 || self.sample_count == 0 || self.context_len < 2 {
            return Err(Error::invalid("horizon, sample_count and context_len must be positive"));
        }
        Ok(())
    }

    fn max_context(&self) -> usize {
        match self.variable {
            SweepVariable::ContextLength => self.values.iter().cloned().fold(0.0, f64::max) as usize,
            SweepVariable::NoiseSigma => self.context_len,
        }
    }

    fn setting(&self, value: f64) -> (usize, f64) {
        match self.variable {
            SweepVariable::ContextLength => (value as usize, self.noise_sigma),
            SweepVariable::NoiseSigma => (self.context_len, value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_var: String,
    pub value: f64,
    pub dataset: String,
    pub seed: u64,
    pub nmse: f64,
    pub naive_nmse: f64,
    pub zeta_prime: f64,
    pub d08: usize,
    pub iso_i: f64,
}

/// Forecast origins and clean values shared by every sweep value of one
/// (dataset, seed): the truth segments never change across the sweep.
struct EvalSet {
    series: Vec<Vec<f64>>,
    origins: Vec<(usize, usize)>,
}

fn eval_set(spec: &DatasetSpec, seed: u64, cfg: &SweepConfig) -> Result<EvalSet> {
    let max_ctx = cfg.max_context();
    if spec.length < max_ctx + cfg.horizon {
        return Err(Error::invalid(format!(
            "dataset {} has length {} < context {max_ctx} + horizon {}",
            spec.name, spec.length, cfg.horizon
        )));
    }
    let data_seed = RngStream::new(seed, stream_id(EVAL_DATA_DOMAIN, 0)).next_u64();
    let series: Vec<Vec<f64>> = spec.generate(data_seed)?.into_iter().map(|s| s.values).collect();
    let mut rng = RngStream::new(seed, stream_id(ORIGIN_DOMAIN, 0));
    let span = spec.length - max_ctx - cfg.horizon + 1;
    let origins = (0..cfg.windows_per_seed)
        .map(|_| (rng.uniform_choice(series.len()), max_ctx + rng.uniform_choice(span)))
        .collect();
    Ok(EvalSet { series, origins })
}

/// One table row: forecast every window at `value`, score NMSE against the
/// clean future, and run the isotropy metrics on the final-layer
/// embeddings of the evaluated contexts.
///
/// Noise draws and forecast streams are keyed by (seed, window) only, so all
/// sweep values share common random numbers.
fn sweep_row(
    params: &ModelParams,
    tokenizer: &TokenizerConfig,
    cfg: &SweepConfig,
    spec: &DatasetSpec,
    set: &EvalSet,
    seed: u64,
    value: f64,
) -> Result<SweepRow> {
    let (ctx_len, sigma) = cfg.setting(value);
    let mut preds = Vec::new();
    let mut naive = Vec::new();
    let mut truth = Vec::new();
    let mut contexts = Vec::new();
    for (w, &(s, origin)) in set.origins.iter().enumerate() {
        let series = &set.series[s];
        let clean = &series[origin - ctx_len..origin];
        let mut noise_rng = RngStream::new(seed, stream_id(NOISE_DOMAIN, w as u64));
        // draw noise for the longest context so shorter ones see a suffix of it
        let max_ctx = cfg.max_context();
        let full = add_noise(&series[origin - max_ctx..origin], sigma, &mut noise_rng);
        let noisy = if sigma == 0.0 { clean.to_vec() } else { full[max_ctx - ctx_len..].to_vec() };
        let scale = fit_scale(&noisy)?;
        let seq = tokenize(&noisy, tokenizer, scale)?;
        let mut rng = RngStream::new(seed, stream_id(FORECAST_DOMAIN, w as u64));
        let f = forecast(params, &seq, tokenizer, cfg.horizon, cfg.sample_count, &mut rng)?;
        preds.extend(f.point);
        naive.extend(naive_baseline(&noisy, cfg.horizon)?);
        truth.extend_from_slice(&series[origin..origin + cfg.horizon]);
        contexts.push(seq.tokens);
    }
    let dump = dump_embeddings(params, &contexts, &LayerSelector::Last)?;
    let analysis = analyze(&dump, &AnalyzeConfig { seed, ..cfg.analyze })?;
    let layer = &analysis.report.layers[0];
    Ok(SweepRow {
        sweep_var: cfg.variable.name().to_string(),
        value,
        dataset: spec.name.clone(),
        seed,
        nmse: nmse(&preds, &truth)?,
        naive_nmse: nmse(&naive, &truth)?,
        zeta_prime: layer.zeta_prime_cos,
        d08: layer.d_08,
        iso_i: layer.isotropy_partition,
    })
}

/// Run a sweep. Rows are ordered by (value, dataset, seed).
pub fn run_sweep(params: &ModelParams, tokenizer: &TokenizerConfig, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut sets = Vec::new();
    for spec in &cfg.datasets {
        for &seed in &cfg.seeds {
            sets.push((spec, seed, eval_set(spec, seed, cfg)?));
        }
    }
    let jobs: Vec<(f64, usize)> = cfg.values.iter().flat_map(|&v| (0..sets.len()).map(move |i| (v, i))).collect();
    par::map_slice(&jobs, |&(value, i)| {
        let (spec, seed, set) = &sets[i];
        sweep_row(params, tokenizer, cfg, spec, set, *seed, value)
    })
    .into_iter()
    .collect()
}

pub fn context_length_sweep(params: &ModelParams, tokenizer: &TokenizerConfig, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.variable != SweepVariable::ContextLength {
        return Err(Error::invalid("expected a context_length sweep"));
    }
    run_sweep(params, tokenizer, cfg)
}

pub fn noise_sweep(params: &ModelParams, tokenizer: &TokenizerConfig, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.variable != SweepVariable::NoiseSigma {
        return Err(Error::invalid("expected a noise_sigma sweep"));
    }
    run_sweep(params, tokenizer, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub hits: usize,
    pub trials: usize,
    pub fraction: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Verdict {
    fn new(name: &str, hits: usize, trials: usize, threshold: f64) -> Self {
        let fraction = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        Self { name: name.into(), hits, trials, fraction, threshold, passed: trials > 0 && fraction >= threshold }
    }
}

fn paired<'a>(rows: &'a [SweepRow], lo: f64, hi: f64) -> Vec<(&'a SweepRow, &'a SweepRow)> {
    rows.iter()
        .filter(|r| r.value == lo)
        .filter_map(|a| rows.iter().find(|b| b.value == hi && b.seed == a.seed && b.dataset == a.dataset).map(|b| (a, b)))
        .collect()
}

/// Directional checks for a noise sweep: the noisiest value against the
/// cleanest, per (dataset, seed).
pub fn noise_verdicts(rows: &[SweepRow]) -> Vec<Verdict> {
    let lo = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let pairs = paired(rows, lo, hi);
    let iso = pairs.iter().filter(|(a, b)| b.zeta_prime.abs() > a.zeta_prime.abs()).count();
    let err = pairs.iter().filter(|(a, b)| b.nmse > a.nmse).count();
    vec![
        Verdict::new("noise_increases_abs_zeta_prime", iso, pairs.len(), 0.6),
        Verdict::new("noise_increases_nmse", err, pairs.len(), 0.8),
    ]
}

/// Directional check for a context-length sweep: the length whose
/// embeddings are less isotropic (larger |ζ′|) has the larger NMSE.
pub fn context_verdicts(rows: &[SweepRow]) -> Vec<Verdict> {
    let lo = rows.iter().map(|r| r.value).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max);
    let pairs = paired(rows, lo, hi);
    let hits = pairs
        .iter()
        .filter(|(a, b)| {
            let (less_iso, other) = if a.zeta_prime.abs() > b.zeta_prime.abs() { (a, b) } else { (b, a) };
            less_iso.nmse >= other.nmse
        })
        .count();
    vec![Verdict::new("less_isotropic_length_has_larger_nmse", hits, pairs.len(), 0.6)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub variable: SweepVariable,
    pub rows: Vec<SweepRow>,
    pub verdicts: Vec<Verdict>,
    pub note: String,
}

pub fn summarize(variable: SweepVariable, rows: Vec<SweepRow>) -> SweepSummary {
    let verdicts = match variable {
        SweepVariable::NoiseSigma => noise_verdicts(&rows),
        SweepVariable::ContextLength => context_verdicts(&rows),
    };
    SweepSummary {
        variable,
        rows,
        verdicts,
        note: "directional checks only; absolute values depend on model scale".into(),
    }
}

pub const SWEEP_CSV_HEADER: &str = "sweep_var,value,dataset,seed,nmse,zeta_prime,d08,iso_I";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sweep_var, r.value, r.dataset, r.seed, r.nmse, r.zeta_prime, r.d08, r.iso_i
        ));
    }
    out
}

/// NMSE of forecasts that are the truths of other windows (a random cyclic
/// shift of the window order). For independent windows this is about
/// `2·var / E[t²]`, whatever the context.
pub fn shuffled_control(truths: &[Vec<f64>], rng: &mut RngStream) -> Result<f64> {
    if truths.len() < 2 {
        return Err(Error::invalid("shuffled control needs at least two windows"));
    }
    let shift = 1 + rng.uniform_choice(truths.len() - 1);
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (i, t) in truths.iter().enumerate() {
        let other = &truths[(i + shift) % truths.len()];
        if other.len() != t.len() {
            return Err(Error::invalid("windows differ in length"));
        }
        pred.extend_from_slice(other);
        truth.extend_from_slice(t);
    }
    nmse(&pred, &truth)
}
