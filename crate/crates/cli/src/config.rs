//! Run configuration: one TOML file with a section per command. Relative
//! paths resolve against the file's directory; command-line flags win.

use std::path::{Path, PathBuf};

use isoprobe_core::isotropy::AnalyzeConfig;
use isoprobe_core::kernelsynth::{default_datasets, DatasetSpec};
use isoprobe_core::model::{LayerSelector, ModelHyper, TrainConfig};
use isoprobe_core::tokenizer::TokenizerConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SynthSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub embed: EmbedSection,
    pub analyze: AnalyzeSection,
    pub verify: VerifySection,
    pub eval: EvalSection,
    pub report: ReportSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            synth: SynthSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            embed: EmbedSection::default(),
            analyze: AnalyzeSection::default(),
            verify: VerifySection::default(),
            eval: EvalSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub length: usize,
    pub series_count: usize,
    /// Subset of the built-in datasets; empty means all of them.
    pub datasets: Vec<String>,
    /// Extra datasets with explicit kernel banks.
    pub custom: Vec<DatasetSpec>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { length: 1024, series_count: 16, datasets: vec![], custom: vec![] }
    }
}

impl SynthSection {
    pub fn dataset_specs(&self) -> Result<Vec<DatasetSpec>, CliError> {
        let builtin = default_datasets(self.length, self.series_count);
        let mut out: Vec<DatasetSpec> = if self.datasets.is_empty() {
            builtin
        } else {
            self.datasets
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    builtin
                        .iter()
                        .find(|d| &d.name == name)
                        .cloned()
                        .ok_or_else(|| CliError::config(format!("synth.datasets[{i}]"), format!("unknown dataset {name:?}")))
                })
                .collect::<Result<_, _>>()?
        };
        out.extend(self.custom.iter().cloned());
        for (i, d) in out.iter().enumerate() {
            if d.length < 2 || d.series_count == 0 || d.max_kernels == 0 || d.bank.is_empty() {
                return Err(CliError::config(format!("synth dataset {i} ({})", d.name), "empty or degenerate dataset"));
            }
            for (j, k) in d.bank.iter().enumerate() {
                k.validate().map_err(|e| CliError::config(format!("synth dataset {}.bank[{j}]", d.name), e.to_string()))?;
            }
            if out[..i].iter().any(|o| o.name == d.name) {
                return Err(CliError::config("synth.datasets", format!("duplicate dataset name {:?}", d.name)));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { vocab_size: 512, lo: -15.0, hi: 15.0 }
    }
}

impl TokenizerSection {
    pub fn build(&self) -> Result<TokenizerConfig, CliError> {
        TokenizerConfig::uniform(self.vocab_size, self.lo, self.hi).map_err(|e| CliError::config("tokenizer", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub dim: usize,
    pub rank: usize,
    pub layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = ModelHyper::default();
        Self { dim: h.dim, rank: h.rank, layers: h.layers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Dataset the model is trained on.
    pub dataset: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: "seasonality_1".into(),
            learning_rate: t.learning_rate,
            steps: t.steps,
            batch_size: t.batch_size,
            context_len: t.context_len,
            horizon: t.horizon,
            stride: 1,
            log_every: 10,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            context_len: self.context_len,
            horizon: self.horizon,
            seed,
        };
        cfg.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        if self.stride == 0 || self.log_every == 0 {
            return Err(CliError::config("train.stride/log_every", "must be positive"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    /// `"all"`, `"last"`, or a list of layer ids (0 = raw lookups).
    pub layers: LayerSpec,
    /// Number of context windows (of `train.context_len` tokens) to embed.
    pub windows: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self { layers: LayerSpec::Named("all".into()), windows: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSpec {
    Named(String),
    Ids(Vec<usize>),
}

impl LayerSpec {
    pub fn selector(&self) -> Result<LayerSelector, CliError> {
        match self {
            LayerSpec::Named(s) if s == "all" => Ok(LayerSelector::All),
            LayerSpec::Named(s) if s == "last" => Ok(LayerSelector::Last),
            LayerSpec::Named(s) => Err(CliError::config("embed.layers", format!("expected \"all\", \"last\" or a list, got {s:?}"))),
            LayerSpec::Ids(ids) => Ok(LayerSelector::Only(ids.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    pub pair_budget: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub silhouette_points: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        let a = AnalyzeConfig::default();
        Self {
            pair_budget: a.pair_budget,
            k_min: a.k_min,
            k_max: a.k_max,
            silhouette_points: a.silhouette_points.unwrap_or(0),
        }
    }
}

impl AnalyzeSection {
    pub fn build(&self, seed: u64) -> Result<AnalyzeConfig, CliError> {
        if self.k_min < 2 || self.k_max < self.k_min || self.pair_budget == 0 {
            return Err(CliError::config("analyze", "need 2 ≤ k_min ≤ k_max and pair_budget > 0"));
        }
        Ok(AnalyzeConfig {
            pair_budget: self.pair_budget,
            k_min: self.k_min,
            k_max: self.k_max,
            silhouette_points: (self.silhouette_points > 0).then_some(self.silhouette_points),
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub heads: usize,
    /// Windows of the training dataset whose traces feed the shift check.
    pub windows: usize,
    pub lemma1_instances: usize,
    pub theorem2_instances: usize,
    pub theorem2_starts: usize,
    pub theorem2_iterations: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            heads: 50,
            windows: 32,
            lemma1_instances: 200,
            theorem2_instances: 100,
            theorem2_starts: 20,
            theorem2_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub dataset: String,
    pub seeds: usize,
    pub windows_per_seed: usize,
    pub sample_count: usize,
    pub context_lengths: Vec<usize>,
    pub noise_sigmas: Vec<f64>,
    /// Series length of the freshly generated evaluation data; defaults to
    /// the dataset's own length so periods match what the model trained on.
    pub length: Option<usize>,
    pub series_count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            dataset: "seasonality_1".into(),
            seeds: 20,
            windows_per_seed: 128,
            sample_count: 20,
            context_lengths: vec![16, 8],
            noise_sigmas: vec![0.0, 0.05],
            length: None,
            series_count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run directories to merge; empty means the current `out`.
    pub runs: Vec<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { runs: vec![] }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("config {}: {e}", path.display())))?;
        let at_line = |span: Option<std::ops::Range<usize>>| {
            span.map(|s| format!(" (line {})", text[..s.start].matches('\n').count() + 1)).unwrap_or_default()
        };
        let de = toml::de::Deserializer::parse(&text)
            .map_err(|e| CliError::config(path.display().to_string(), format!("{}{}", e.message(), at_line(e.span()))))?;
        let mut cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            let field = if field == "." { path.display().to_string() } else { field };
            CliError::config(field, format!("{}{}", inner.message(), at_line(inner.span())))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out = resolve(base, &cfg.out);
        cfg.report.runs = cfg.report.runs.iter().map(|r| resolve(base, r)).collect();
        Ok(cfg)
    }

    pub fn model_hyper(&self) -> Result<ModelHyper, CliError> {
        let h = ModelHyper {
            vocab_size: self.tokenizer.vocab_size,
            dim: self.model.dim,
            rank: self.model.rank,
            layers: self.model.layers,
        };
        h.validate().map_err(|e| CliError::config("model", e.to_string()))?;
        Ok(h)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
