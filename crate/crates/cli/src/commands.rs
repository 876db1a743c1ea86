//! One function per subcommand. Each reads hash-checked upstream artifacts
//! from the run root, writes only into `<root>/<command>/`, and finishes
//! with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use isoprobe_core::eval::{self, summarize, SweepConfig, SweepSummary, SweepVariable};
use isoprobe_core::formats::{read_checkpoint, read_dump, write_checkpoint, write_dump};
use isoprobe_core::isotropy::{analyze, IsotropyReport};
use isoprobe_core::kernelsynth::{DatasetSpec, TimeSeries};
use isoprobe_core::model::{
    dump_embeddings, forward, train, ModelHyper, ModelParams, TrainConfig, Window,
};
use isoprobe_core::numerics::{stream_id, Matrix, RngStream};
use isoprobe_core::theory::{
    lemma1_suite, small_lambda_approx_check, theorem1_shift, theorem2_suite, DownstreamHead, SuiteSummary,
    DEFAULT_RHOS, THEORY_DOMAIN,
};
use isoprobe_core::tokenizer::{TokenId, TokenizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{load_manifest, to_json_bytes, Recorder, RunManifest, MANIFEST_FILE};

pub const SCHEMA_VERSION: u32 = 1;

/// Per-dataset generation seed derived from the run seed and the name.
pub fn dataset_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub series: Vec<SeriesInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesInfo {
    pub kernel: String,
    pub stream_id: u64,
    pub jitter: f64,
}

pub fn dataset_csv(series: &[TimeSeries]) -> String {
    let mut out = String::from("series,index,value\n");
    for (s, ts) in series.iter().enumerate() {
        for (i, v) in ts.values.iter().enumerate() {
            writeln!(out, "{s},{i},{v}").unwrap();
        }
    }
    out
}

pub fn parse_dataset_csv(bytes: &[u8]) -> CliResult<Vec<Vec<f64>>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::Format(e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("series,index,value") {
        return Err(CliError::Format("dataset csv: unexpected header".into()));
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || CliError::Format(format!("dataset csv line {}: {line:?}", n + 2));
        let mut f = line.split(',');
        let s: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let i: usize = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let v: f64 = f.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if s == out.len() {
            out.push(Vec::new());
        }
        if s + 1 != out.len() || i != out[s].len() {
            return Err(bad());
        }
        out[s].push(v);
    }
    Ok(out)
}

pub fn synth(cfg: &Config) -> CliResult<RunManifest> {
    let specs = cfg.synth.dataset_specs()?;
    let mut rec = Recorder::new(&cfg.out, "synth")?;
    for spec in &specs {
        let seed = dataset_seed(cfg.seed, &spec.name);
        let series = spec.generate(seed)?;
        let sidecar = DatasetSidecar {
            spec: spec.clone(),
            seed,
            series: series
                .iter()
                .map(|s| SeriesInfo { kernel: s.origin.kernel.to_string(), stream_id: s.origin.stream_id, jitter: s.origin.jitter })
                .collect(),
        };
        rec.write(&format!("{}.csv", spec.name), dataset_csv(&series).as_bytes())?;
        rec.write(&format!("{}.json", spec.name), &to_json_bytes(&sidecar)?)?;
    }
    rec.finish(cfg.seed, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub hyper: ModelHyper,
    pub tokenizer: TokenizerConfig,
    pub train: TrainConfig,
    pub dataset: String,
    pub windows: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn training_windows(series: &[Vec<f64>], cfg: &Config, tok: &TokenizerConfig) -> CliResult<Vec<Window>> {
    let mut out = Vec::new();
    for s in series {
        out.extend(eval::windows_from_series(s, cfg.train.context_len, cfg.train.horizon, cfg.train.stride, tok)?);
    }
    if out.is_empty() {
        return Err(CliError::config("train.context_len", "series are shorter than one training window"));
    }
    Ok(out)
}

pub fn train_cmd(cfg: &Config) -> CliResult<RunManifest> {
    let hyper = cfg.model_hyper()?;
    let tcfg = cfg.train.train_config(cfg.seed)?;
    let tok = cfg.tokenizer.build()?;
    let mut rec = Recorder::new(&cfg.out, "train")?;
    let series = parse_dataset_csv(&rec.read_input("synth", &format!("{}.csv", cfg.train.dataset))?)?;
    let windows = training_windows(&series, cfg, &tok)?;
    let outcome = train(&windows, hyper, &tcfg).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut ckpt = Vec::new();
    write_checkpoint(&outcome.params, &mut ckpt)?;
    rec.write("model.bin", &ckpt)?;
    let card = ModelCard {
        hyper,
        tokenizer: tok,
        train: tcfg,
        dataset: cfg.train.dataset.clone(),
        windows: windows.len(),
        initial_loss: outcome.losses[0],
        final_loss: *outcome.losses.last().unwrap(),
    };
    rec.write("model.json", &to_json_bytes(&card)?)?;
    let mut curve = String::from("step,loss\n");
    for (step, l) in outcome.losses.iter().enumerate() {
        if step % cfg.train.log_every == 0 || step + 1 == outcome.losses.len() {
            writeln!(curve, "{step},{l}").unwrap();
        }
    }
    rec.write("loss.csv", curve.as_bytes())?;
    rec.finish(cfg.seed, cfg)
}

fn load_model(rec: &mut Recorder) -> CliResult<(ModelParams, ModelCard)> {
    let params = read_checkpoint(&mut rec.read_input("train", "model.bin")?.as_slice())?;
    let card: ModelCard = serde_json::from_slice(&rec.read_input("train", "model.json")?)
        .map_err(|e| CliError::Format(format!("model.json: {e}")))?;
    if params.hyper() != card.hyper {
        return Err(CliError::StaleArtifact("model.bin and model.json disagree on shape".into()));
    }
    Ok((params, card))
}

pub fn embed(cfg: &Config) -> CliResult<RunManifest> {
    let selector = cfg.embed.layers.selector()?;
    let mut rec = Recorder::new(&cfg.out, "embed")?;
    let (params, card) = load_model(&mut rec)?;
    let series = parse_dataset_csv(&rec.read_input("synth", &format!("{}.csv", card.dataset))?)?;
    let t = card.train.context_len;
    let mut contexts: Vec<Vec<TokenId>> = Vec::new();
    'outer: for s in &series {
        for w in eval::windows_from_series(s, t, card.train.horizon, t, &card.tokenizer)? {
            if contexts.len() == cfg.embed.windows {
                break 'outer;
            }
            contexts.push(w.tokens[..t].to_vec());
        }
    }
    if contexts.is_empty() {
        return Err(CliError::config("embed.windows", "no context windows available"));
    }
    let dump = dump_embeddings(&params, &contexts, &selector)?;
    let mut bytes = Vec::new();
    write_dump(&dump, &mut bytes)?;
    rec.write("embeddings.bin", &bytes)?;
    rec.finish(cfg.seed, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotropySection {
    pub schema_version: u32,
    pub report: IsotropyReport,
}

pub const PLOT_HEADER: &str = "layer,pc1,pc2,pc3,cluster_id,token_id";

pub fn analyze_cmd(cfg: &Config) -> CliResult<RunManifest> {
    let acfg = cfg.analyze.build(cfg.seed)?;
    let mut rec = Recorder::new(&cfg.out, "analyze")?;
    let dump = read_dump(&mut rec.read_input("embed", "embeddings.bin")?.as_slice())?;
    let analysis = analyze(&dump, &acfg)?;
    let mut plot = String::from(PLOT_HEADER);
    plot.push('\n');
    for r in &analysis.plot {
        writeln!(plot, "{},{},{},{},{},{}", r.layer, r.pc[0], r.pc[1], r.pc[2], r.cluster_id, r.token_id).unwrap();
    }
    let section = IsotropySection { schema_version: SCHEMA_VERSION, report: analysis.report };
    rec.write("isotropy.json", &to_json_bytes(&section)?)?;
    rec.write("plot.csv", plot.as_bytes())?;
    rec.finish(cfg.seed, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub seed: u64,
    pub instances: usize,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationSection {
    pub schema_version: u32,
    pub all_passed: bool,
    pub checks: Vec<CheckOutcome>,
}

/// Logit vectors at every scored position of the windows, with targets.
pub fn scored_logits(params: &ModelParams, windows: &[Window]) -> CliResult<(Vec<Vec<f64>>, Vec<TokenId>)> {
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for w in windows {
        let trace = forward(&w.tokens, params)?;
        for (pos, t) in w.prediction_pairs() {
            logits.push(trace.logits_at(params, pos));
            targets.push(t);
        }
    }
    Ok((logits, targets))
}

pub fn theorem1_check(params: &ModelParams, windows: &[Window], heads: usize, seed: u64) -> CliResult<CheckOutcome> {
    let (logits, targets) = scored_logits(params, windows)?;
    let mut rng = RngStream::new(seed, stream_id(THEORY_DOMAIN + 5, 0));
    let n = params.embed.rows();
    let mut worst_tv: f64 = 0.0;
    let mut worst_loss: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..heads {
        let head = DownstreamHead::sample(n, &mut rng);
        let (_, r) = theorem1_shift(&logits, Some(&targets), &head)?;
        worst_tv = worst_tv.max(r.max_total_variation);
        worst_loss = worst_loss.max(r.loss_diff.unwrap_or(0.0));
        failures += usize::from(!r.passed);
    }
    Ok(CheckOutcome {
        name: "theorem1_shift".into(),
        passed: failures == 0 && heads > 0,
        seed,
        instances: heads,
        detail: serde_json::json!({
            "positions": logits.len(),
            "max_total_variation": worst_tv,
            "max_loss_difference": worst_loss,
            "failing_heads": failures,
        }),
    })
}

fn suite_outcome(s: SuiteSummary) -> CheckOutcome {
    CheckOutcome {
        name: s.name,
        passed: s.passed,
        seed: s.seed,
        instances: s.instances,
        detail: serde_json::json!({ "failures": s.failures, "worst": s.worst, "extra": s.detail }),
    }
}

pub fn small_lambda_check(seed: u64) -> CliResult<CheckOutcome> {
    let mut rng = RngStream::new(seed, stream_id(THEORY_DOMAIN + 6, 0));
    let psi = Matrix::new(8, 4, rng.gaussians(32))?.centered();
    let dir = Matrix::new(4, 4, rng.gaussians(16))?;
    let rows = small_lambda_approx_check(&psi, &dir, &DEFAULT_RHOS)?;
    let monotone = rows.windows(2).all(|w| {
        w[1].max_weight_error * 2.0 <= w[0].max_weight_error && w[1].substitution_error * 2.0 <= w[0].substitution_error
    });
    let mut wins = 0;
    for _ in 0..50 {
        let psi = Matrix::new(8, 4, rng.gaussians(32))?;
        let dir = Matrix::new(4, 4, rng.gaussians(16))?;
        let raw = small_lambda_approx_check(&psi, &dir, &[1e-2])?[0];
        let cen = small_lambda_approx_check(&psi.centered(), &dir, &[1e-2])?[0];
        wins += usize::from(cen.substitution_error < raw.substitution_error);
    }
    Ok(CheckOutcome {
        name: "small_lambda_approximation".into(),
        passed: monotone && wins >= 45,
        seed,
        instances: 51,
        detail: serde_json::json!({ "sweep": rows, "centering_wins": wins }),
    })
}

pub fn verify(cfg: &Config) -> CliResult<RunManifest> {
    let v = &cfg.verify;
    let mut rec = Recorder::new(&cfg.out, "verify")?;
    let (params, card) = load_model(&mut rec)?;
    let series = parse_dataset_csv(&rec.read_input("synth", &format!("{}.csv", card.dataset))?)?;
    let mut windows = Vec::new();
    for s in &series {
        let stride = card.train.context_len + card.train.horizon;
        windows.extend(eval::windows_from_series(s, card.train.context_len, card.train.horizon, stride, &card.tokenizer)?);
    }
    windows.truncate(v.windows.max(1));
    let checks = vec![
        theorem1_check(&params, &windows, v.heads, cfg.seed)?,
        suite_outcome(lemma1_suite(v.lemma1_instances, cfg.seed)?.0),
        suite_outcome(theorem2_suite(v.theorem2_instances, v.theorem2_starts, v.theorem2_iterations, cfg.seed)?),
        small_lambda_check(cfg.seed)?,
    ];
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let section = VerificationSection { schema_version: SCHEMA_VERSION, all_passed: failed.is_empty(), checks };
    rec.write("verification.json", &to_json_bytes(&section)?)?;
    let manifest = rec.finish(cfg.seed, cfg)?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(CliError::CheckFailed(failed))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSection {
    pub schema_version: u32,
    pub sweeps: Vec<SweepSummary>,
}

pub fn eval_cmd(cfg: &Config) -> CliResult<RunManifest> {
    let e = &cfg.eval;
    let mut rec = Recorder::new(&cfg.out, "eval")?;
    let (params, card) = load_model(&mut rec)?;
    let sidecar: DatasetSidecar = serde_json::from_slice(&rec.read_input("synth", &format!("{}.json", e.dataset))?)
        .map_err(|err| CliError::Format(format!("{}.json: {err}", e.dataset)))?;
    let spec = DatasetSpec { length: e.length.unwrap_or(sidecar.spec.length), series_count: e.series_count, ..sidecar.spec };
    let seeds: Vec<u64> = (0..e.seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let base = SweepConfig {
        variable: SweepVariable::ContextLength,
        values: e.context_lengths.iter().map(|&v| v as f64).collect(),
        datasets: vec![spec],
        context_len: card.train.context_len,
        noise_sigma: 0.0,
        horizon: card.train.horizon,
        sample_count: e.sample_count,
        windows_per_seed: e.windows_per_seed,
        seeds,
        analyze: cfg.analyze.build(cfg.seed)?,
    };
    let bad = |field: &str, err: isoprobe_core::Error| CliError::config(format!("eval.{field}"), err.to_string());
    base.validate().map_err(|err| bad("context_lengths", err))?;
    if e.context_lengths.iter().any(|&l| l > card.train.context_len) {
        return Err(CliError::config("eval.context_lengths", "lengths must not exceed the training context"));
    }
    let noise = SweepConfig { variable: SweepVariable::NoiseSigma, values: e.noise_sigmas.clone(), ..base.clone() };
    noise.validate().map_err(|err| bad("noise_sigmas", err))?;

    let ctx_rows = eval::context_length_sweep(&params, &card.tokenizer, &base)?;
    let noise_rows = eval::noise_sweep(&params, &card.tokenizer, &noise)?;
    rec.write("context_length.csv", eval::sweep_csv(&ctx_rows).as_bytes())?;
    rec.write("noise.csv", eval::sweep_csv(&noise_rows).as_bytes())?;
    let section = SweepSection {
        schema_version: SCHEMA_VERSION,
        sweeps: vec![summarize(SweepVariable::ContextLength, ctx_rows), summarize(SweepVariable::NoiseSigma, noise_rows)],
    };
    rec.write("eval.json", &to_json_bytes(&section)?)?;
    rec.finish(cfg.seed, cfg)
}

/// Read an output file of a completed run, checked against its manifest.
fn read_checked(run: &Path, command: &str, file: &str) -> CliResult<Option<Vec<u8>>> {
    let dir = run.join(command);
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(None);
    }
    let manifest = load_manifest(&dir)?;
    let rel = format!("{command}/{file}");
    let entry = manifest
        .outputs
        .iter()
        .find(|e| e.path == rel)
        .ok_or_else(|| CliError::StaleArtifact(format!("{} lacks {rel}", run.display())))?;
    let bytes = std::fs::read(dir.join(file)).map_err(|e| CliError::MissingInput(format!("{}: {e}", dir.join(file).display())))?;
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(CliError::StaleArtifact(format!("{}/{rel} does not match its manifest hash", run.display())));
    }
    Ok(Some(bytes))
}

fn read_section(run: &Path, command: &str, file: &str) -> CliResult<Option<serde_json::Value>> {
    match read_checked(run, command, file)? {
        Some(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| CliError::Format(format!("{command}/{file}: {e}"))),
        None => Ok(None),
    }
}

fn run_id(run: &Path) -> String {
    run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| run.display().to_string())
}

/// Merge the analyze/verify/eval sections of one or more runs.
pub fn report(cfg: &Config) -> CliResult<RunManifest> {
    let runs: Vec<PathBuf> = if cfg.report.runs.is_empty() { vec![cfg.out.clone()] } else { cfg.report.runs.clone() };
    let mut rec = Recorder::new(&cfg.out, "report")?;
    let mut merged = Vec::new();
    let mut versions = BTreeMap::new();
    let mut plot = format!("run,{PLOT_HEADER}\n");
    let mut sweeps = format!("run,{}\n", eval::SWEEP_CSV_HEADER);
    for run in &runs {
        let id = run_id(run);
        let mut entry = serde_json::Map::new();
        entry.insert("run".into(), id.clone().into());
        for (key, command, file) in
            [("isotropy", "analyze", "isotropy.json"), ("verification", "verify", "verification.json"), ("sweeps", "eval", "eval.json")]
        {
            if let Some(v) = read_section(run, command, file)? {
                let version = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0);
                versions.entry(version).or_insert_with(Vec::new).push(format!("{id}/{command}"));
                entry.insert(key.into(), v);
            }
        }
        if entry.len() == 1 {
            return Err(CliError::MissingInput(format!("{} has no completed analyze, verify or eval step", run.display())));
        }
        for (command, file, to_plot) in [("analyze", "plot.csv", true), ("eval", "context_length.csv", false), ("eval", "noise.csv", false)] {
            if let Some(bytes) = read_checked(run, command, file)? {
                let text = String::from_utf8(bytes).map_err(|e| CliError::Format(format!("{command}/{file}: {e}")))?;
                let sink = if to_plot { &mut plot } else { &mut sweeps };
                for line in text.lines().skip(1) {
                    writeln!(sink, "{id},{line}").unwrap();
                }
            }
        }
        merged.push(serde_json::Value::Object(entry));
    }
    if versions.len() > 1 {
        return Err(CliError::MergeRefused(format!("conflicting schema versions: {versions:?}")));
    }
    let version = versions.keys().next().copied().unwrap_or(SCHEMA_VERSION as u64);
    let doc = serde_json::json!({ "schema_version": version, "runs": merged });
    rec.write("report.json", &to_json_bytes(&doc)?)?;
    rec.write("plot.csv", plot.as_bytes())?;
    rec.write("sweeps.csv", sweeps.as_bytes())?;
    rec.finish(cfg.seed, cfg)
}
