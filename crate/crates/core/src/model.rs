//! Log-linear autoregressive forecaster built from stacked self-attention.
//!
//! The network is exactly: embedding lookup, `layers` applications of
//! `g(Ψ) = softmax(ΨΛΨᵀ)Ψ` with `Λ = W_Q W_Kᵀ` (causally masked), and a
//! softmax head whose logits are inner products between the final-layer row
//! and the same embedding table. No value projection, MLP, normalization or
//! residual path, so the trained map is the one the attention Jacobian
//! bounds talk about.
//!
//! Gradients are hand-derived reverse mode; see [`grad`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::isotropy::{EmbeddingDump, EmbeddingRecord};
use crate::numerics::{dot, stream_id, Matrix, RngStream};
use crate::par;
use crate::tokenizer::{detokenize, TokenId, TokenSequence, TokenizerConfig};

pub const INIT_DOMAIN: u16 = 10;
pub const BATCH_DOMAIN: u16 = 11;
pub const FORECAST_DOMAIN: u16 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHyper {
    pub vocab_size: usize,
    pub dim: usize,
    /// Query/key width `m` (rank bound of `Λ`).
    pub rank: usize,
    pub layers: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self { vocab_size: 512, dim: 64, rank: 16, layers: 2 }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.dim == 0 || self.rank == 0 || self.layers == 0 {
            return Err(Error::invalid(format!("degenerate model shape {self:?}")));
        }
        if self.rank > self.dim {
            return Err(Error::invalid(format!("rank {} exceeds dim {}", self.rank, self.dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub wq: Matrix,
    pub wk: Matrix,
}

impl AttentionLayer {
    pub fn lambda(&self) -> Matrix {
        self.wq.matmul_transposed(&self.wk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `N × D`; row `k` is the embedding of token `k`, shared with the head.
    pub embed: Matrix,
    pub layers: Vec<AttentionLayer>,
}

impl ModelParams {
    /// Gaussian initialization: embeddings and projections with std `1/√D`.
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = RngStream::new(seed, stream_id(INIT_DOMAIN, 0));
        let sd = 1.0 / (hyper.dim as f64).sqrt();
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| sd * rng.gaussian()).collect();
            Matrix::from_raw(r, c, data)
        };
        let embed = draw(hyper.vocab_size, hyper.dim);
        let layers = (0..hyper.layers)
            .map(|_| AttentionLayer { wq: draw(hyper.dim, hyper.rank), wk: draw(hyper.dim, hyper.rank) })
            .collect();
        Ok(Self { embed, layers })
    }

    pub fn hyper(&self) -> ModelHyper {
        ModelHyper {
            vocab_size: self.embed.rows(),
            dim: self.embed.cols(),
            rank: self.layers.first().map_or(0, |l| l.wq.cols()),
            layers: self.layers.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hyper();
        h.validate()?;
        for (i, l) in self.layers.iter().enumerate() {
            for (name, w) in [("wq", &l.wq), ("wk", &l.wk)] {
                if w.rows() != h.dim || w.cols() != h.rank {
                    return Err(Error::invalid(format!("layer {i} {name} has shape {}x{}", w.rows(), w.cols())));
                }
            }
        }
        if !self.tensors().iter().all(|t| t.is_finite()) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(())
    }

    /// Tensors in checkpoint order: embed, then `wq`, `wk` per layer.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.push(&l.wq);
            out.push(&l.wk);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.wq);
            out.push(&mut l.wk);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["embed".to_string()];
        for i in 0..self.layers.len() {
            out.push(format!("layers.{i}.wq"));
            out.push(format!("layers.{i}.wk"));
        }
        out
    }
}

/// Attention weights `p_ij ∝ exp(ψ_iᵀΛψ_j)`, normalized over `j` (over
/// `j ≤ i` when causal), with row-max subtraction.
pub fn attention_weights(psi: &Matrix, lambda: &Matrix, causal: bool) -> Result<Matrix> {
    let (n, d) = (psi.rows(), psi.cols());
    if lambda.rows() != d || lambda.cols() != d {
        return Err(Error::invalid(format!(
            "Λ is {}x{}, embeddings have dimension {d}",
            lambda.rows(),
            lambda.cols()
        )));
    }
    let query = psi.matmul(lambda);
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        let width = if causal { i + 1 } else { n };
        let row = p.row_mut(i);
        for j in 0..width {
            row[j] = dot(query.row(i), psi.row(j));
        }
        let max = row[..width].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::numeric(format!("attention logits in row {i} are not finite")));
        }
        let mut z = 0.0;
        for v in &mut row[..width] {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in &mut row[..width] {
            *v /= z;
        }
    }
    Ok(p)
}

pub fn self_attention(psi: &Matrix, lambda: &Matrix, causal: bool) -> Result<Matrix> {
    Ok(attention_weights(psi, lambda, causal)?.matmul(psi))
}

/// Numerically stable `log Σ exp(z_i)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Embedding lookups (layer 0).
    pub input: Matrix,
    /// Output of each attention layer, `layers` entries.
    pub activations: Vec<Matrix>,
    /// Attention weights used by each layer.
    pub attention: Vec<Matrix>,
    /// `ψ(k_{1:T})`: last row of the final layer.
    pub encoding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    /// Activation rows for a layer id, where 0 is the raw embedding lookup.
    pub fn layer(&self, id: usize) -> &Matrix {
        if id == 0 {
            &self.input
        } else {
            &self.activations[id - 1]
        }
    }

    /// Head logits read off an arbitrary position of the final layer.
    pub fn logits_at(&self, params: &ModelParams, pos: usize) -> Vec<f64> {
        params.embed.matvec(self.activations.last().unwrap().row(pos))
    }
}

fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(Error::invalid(format!("token {t} at position {i} outside vocabulary of {vocab}")));
    }
    Ok(())
}

pub fn forward(tokens: &[TokenId], params: &ModelParams) -> Result<ForwardTrace> {
    check_tokens(tokens, params.embed.rows())?;
    let input = params.embed.select_rows(tokens);
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut attention = Vec::with_capacity(params.layers.len());
    let mut x = input.clone();
    for layer in &params.layers {
        let p = attention_weights(&x, &layer.lambda(), true)?;
        x = p.matmul(&x);
        attention.push(p);
        activations.push(x.clone());
    }
    let encoding = x.row(x.rows() - 1).to_vec();
    let logits = params.embed.matvec(&encoding);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let probs = softmax(&logits);
    Ok(ForwardTrace { input, activations, attention, encoding, logits, probs })
}

/// Mean negative log-likelihood of one target per logit vector.
pub fn loss_from_logits<L: AsRef<[f64]>>(logits: &[L], targets: &[TokenId]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions but {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (z, &t) in logits.iter().zip(targets) {
        let z = z.as_ref();
        if t >= z.len() {
            return Err(Error::invalid(format!("target {t} outside vocabulary of {}", z.len())));
        }
        total += log_sum_exp(z) - z[t];
    }
    Ok(total / targets.len() as f64)
}

pub fn loss(traces: &[ForwardTrace], targets: &[TokenId]) -> Result<f64> {
    let logits: Vec<&[f64]> = traces.iter().map(|t| t.logits.as_slice()).collect();
    loss_from_logits(&logits, targets)
}

/// A tokenized training window: `context_len` context tokens followed by
/// the forecast targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub tokens: Vec<TokenId>,
    pub context_len: usize,
}

impl Window {
    /// Positions whose head output is scored, and the token each must predict.
    pub fn prediction_pairs(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        (self.context_len..self.tokens.len()).map(move |t| (t - 1, self.tokens[t]))
    }

    fn validate(&self) -> Result<()> {
        if self.context_len == 0 || self.context_len >= self.tokens.len() {
            return Err(Error::invalid(format!(
                "window of {} tokens cannot have context {}",
                self.tokens.len(),
                self.context_len
            )));
        }
        Ok(())
    }
}

/// Gradient of the mean loss, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Matrix,
    pub layers: Vec<(Matrix, Matrix)>,
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Self {
            embed: Matrix::zeros(params.embed.rows(), params.embed.cols()),
            layers: params
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.wq.rows(), l.wq.cols()), Matrix::zeros(l.wk.rows(), l.wk.cols())))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embed];
        for (q, k) in &self.layers {
            out.push(q);
            out.push(k);
        }
        out
    }

    fn accumulate(&mut self, other: &Gradients, weight: f64) {
        let add = |a: &mut Matrix, b: &Matrix| {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += weight * y);
        };
        add(&mut self.embed, &other.embed);
        for ((q, k), (oq, ok)) in self.layers.iter_mut().zip(&other.layers) {
            add(q, oq);
            add(k, ok);
        }
    }
}

/// Loss and gradient for one window (mean over its scored positions).
fn window_grad(params: &ModelParams, window: &Window) -> Result<(f64, Gradients)> {
    window.validate()?;
    let trace = forward(&window.tokens, params)?;
    let n = window.tokens.len();
    let d = params.embed.cols();
    let mut g = Gradients::zeros_like(params);
    let last = trace.activations.last().unwrap();
    let mut dx = Matrix::zeros(n, d);
    let count = window.tokens.len() - window.context_len;
    let mut total = 0.0;

    // head: z = E h, loss = lse(z) - z_target
    for (pos, target) in window.prediction_pairs() {
        let h = last.row(pos);
        let z = params.embed.matvec(h);
        let lse = log_sum_exp(&z);
        total += lse - z[target];
        let mut dz: Vec<f64> = z.iter().map(|v| (v - lse).exp() / count as f64).collect();
        dz[target] -= 1.0 / count as f64;
        for (k, &dzk) in dz.iter().enumerate() {
            for (ge, &hv) in g.embed.row_mut(k).iter_mut().zip(h) {
                *ge += dzk * hv;
            }
        }
        let dh = params.embed.tmatvec(&dz);
        for (a, b) in dx.row_mut(pos).iter_mut().zip(dh) {
            *a += b;
        }
    }

    for li in (0..params.layers.len()).rev() {
        let x = trace.layer(li);
        let p = &trace.attention[li];
        let layer = &params.layers[li];
        let lambda = layer.lambda();
        // Y = P X
        let dp = dx.matmul_transposed(x);
        let mut dx_prev = p.transpose().matmul(&dx);
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let pr = &p.row(i)[..=i];
            let dpr = &dp.row(i)[..=i];
            let inner = dot(pr, dpr);
            for j in 0..=i {
                ds.set(i, j, pr[j] * (dpr[j] - inner));
            }
        }
        // S = X Λ Xᵀ
        let xl = x.matmul(&lambda);
        let xlt = x.matmul_transposed(&lambda);
        dx_prev = dx_prev.add(&ds.matmul(&xlt)).add(&ds.transpose().matmul(&xl));
        let dlambda = x.transpose().matmul(&ds.matmul(x));
        // Λ = W_Q W_Kᵀ
        g.layers[li].0 = dlambda.matmul(&layer.wk);
        g.layers[li].1 = dlambda.transpose().matmul(&layer.wq);
        dx = dx_prev;
    }

    for (t, &tok) in window.tokens.iter().enumerate() {
        for (a, b) in g.embed.row_mut(tok).iter_mut().zip(dx.row(t)) {
            *a += b;
        }
    }
    Ok((total / count as f64, g))
}

/// Mean loss over the batch and its exact gradient.
///
/// Per-window gradients are computed in parallel and summed in window order.
pub fn grad(params: &ModelParams, batch: &[Window]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts = par::map_slice(batch, |w| window_grad(params, w));
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let weight = 1.0 / batch.len() as f64;
    for part in parts {
        let (l, g) = part?;
        loss += l * weight;
        total.accumulate(&g, weight);
    }
    for (name, t) in params.tensor_names().iter().zip(total.tensors()) {
        if !t.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
    }
    Ok((loss, total))
}

/// Mean loss without gradients.
pub fn batch_loss(params: &ModelParams, batch: &[Window]) -> Result<f64> {
    let parts = par::map_slice(batch, |w| -> Result<f64> {
        w.validate()?;
        let trace = forward(&w.tokens, params)?;
        let (logits, targets): (Vec<Vec<f64>>, Vec<TokenId>) =
            w.prediction_pairs().map(|(pos, t)| (trace.logits_at(params, pos), t)).unzip();
        loss_from_logits(&logits, &targets)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, steps: 5000, batch_size: 16, context_len: 16, horizon: 4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.steps == 0
            || self.batch_size == 0
            || self.context_len == 0
            || self.horizon == 0
        {
            return Err(Error::invalid(format!("train config must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Minibatch loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

/// Plain minibatch SGD with a fixed learning rate.
///
/// Batches are drawn with replacement from `(seed, BATCH_DOMAIN)`, so a run
/// is a pure function of its inputs.
pub fn train(windows: &[Window], hyper: ModelHyper, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(hyper, cfg.seed)?;
    train_from(params, windows, cfg)
}

pub fn train_from(mut params: ModelParams, windows: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let mut rng = RngStream::new(cfg.seed, stream_id(BATCH_DOMAIN, 0));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for step in 0..cfg.steps {
        let batch: Vec<Window> = (0..cfg.batch_size)
            .map(|_| windows[rng.uniform_choice(windows.len())].clone())
            .collect();
        let (l, g) = grad(&params, &batch).map_err(|e| Error::TrainingFailure(format!("step {step}: {e}")))?;
        let first = *initial.get_or_insert(l);
        if !l.is_finite() || l > 1e3 * first {
            return Err(Error::TrainingFailure(format!("diverged at step {step}: loss {l} (initial {first})")));
        }
        losses.push(l);
        for (p, gt) in params.tensors_mut().into_iter().zip(g.tensors()) {
            p.data_mut().iter_mut().zip(gt.data()).for_each(|(w, d)| *w -= cfg.learning_rate * d);
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Draw an index from a categorical distribution by inverse CDF.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone)]
pub struct Forecast {
    pub trajectories: Vec<Vec<TokenId>>,
    /// Mean over trajectories of the detokenized values.
    pub point: Vec<f64>,
}

/// Sample `sample_count` autoregressive continuations of `horizon` tokens.
pub fn forecast(
    params: &ModelParams,
    context: &TokenSequence,
    tokenizer: &TokenizerConfig,
    horizon: usize,
    sample_count: usize,
    rng: &mut RngStream,
) -> Result<Forecast> {
    if horizon == 0 || sample_count == 0 {
        return Err(Error::invalid("horizon and sample_count must be at least 1"));
    }
    let mut trajectories = Vec::with_capacity(sample_count);
    let mut point = vec![0.0; horizon];
    for _ in 0..sample_count {
        let mut tokens = context.tokens.clone();
        for _ in 0..horizon {
            let trace = forward(&tokens, params)?;
            tokens.push(sample_categorical(&trace.probs, rng));
        }
        let traj = tokens.split_off(context.tokens.len());
        let values = detokenize(&TokenSequence { tokens: traj.clone(), scale: context.scale }, tokenizer)?;
        for (p, v) in point.iter_mut().zip(values) {
            *p += v / sample_count as f64;
        }
        trajectories.push(traj);
    }
    Ok(Forecast { trajectories, point })
}

/// Which activation layers to record. Layer 0 is the raw embedding lookup;
/// `1..=layers` are attention outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    All,
    Last,
    Only(Vec<usize>),
}

impl LayerSelector {
    pub fn resolve(&self, layer_count: usize) -> Result<Vec<usize>> {
        match self {
            LayerSelector::All => Ok((1..=layer_count).collect()),
            LayerSelector::Last => Ok(vec![layer_count]),
            LayerSelector::Only(ids) => {
                if let Some(bad) = ids.iter().find(|&&i| i > layer_count) {
                    return Err(Error::invalid(format!("layer {bad} out of range 0..={layer_count}")));
                }
                Ok(ids.clone())
            }
        }
    }
}

/// Stable id of the context `tokens[..]` (first 8 bytes of its SHA-256).
pub fn context_hash(tokens: &[TokenId]) -> u64 {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Record every position's activation row for the selected layers.
///
/// Records are ordered by window, then layer, then position; the context id
/// of a record hashes the token prefix ending at its position.
pub fn dump_embeddings(params: &ModelParams, windows: &[Vec<TokenId>], layers: &LayerSelector) -> Result<EmbeddingDump> {
    let ids = layers.resolve(params.layers.len())?;
    let per_window = par::map_slice(windows, |w| -> Result<Vec<EmbeddingRecord>> {
        let trace = forward(w, params)?;
        let mut out = Vec::with_capacity(ids.len() * w.len());
        for &l in &ids {
            let act = trace.layer(l);
            for (pos, &tok) in w.iter().enumerate() {
                out.push(EmbeddingRecord {
                    layer: l as u32,
                    token_id: tok as u32,
                    context_id: context_hash(&w[..=pos]),
                    vector: act.row(pos).to_vec(),
                });
            }
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for part in per_window {
        records.extend(part?);
    }
    EmbeddingDump::new(params.embed.cols(), records)
}
