//! Embedding-space diagnostics: effective dimension, inter-token cosine
//! similarity (global and cluster-adjusted), k-means with silhouette-based
//! model selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm_sq, pca, stream_id, Matrix, RngStream};
use crate::par;
use crate::theory::isotropy_partition;

pub const ISOTROPY_DOMAIN: u16 = 20;

/// One contextual embedding instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub layer: u32,
    pub token_id: u32,
    pub context_id: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingDump {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::invalid(format!("record {i} has {} entries, expected {dim}", r.vector.len())));
            }
            if r.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("record {i} is not finite")));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn layers(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.records.iter().map(|r| r.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Indices of the records belonging to `layer`, in dump order.
    pub fn layer_indices(&self, layer: u32) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].layer == layer).collect()
    }

    /// The layer's vectors stacked as rows, in dump order.
    pub fn layer_matrix(&self, layer: u32) -> Matrix {
        let idx = self.layer_indices(layer);
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            data.extend_from_slice(&self.records[i].vector);
        }
        Matrix::from_raw(idx.len(), self.dim, data)
    }

    /// Token id → indices of its instances in the layer, i.e. `Ψ̃(k)`.
    pub fn by_token(&self, layer: u32) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in self.layer_indices(layer) {
            map.entry(self.records[i].token_id).or_default().push(i);
        }
        map
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimension {
    pub d: usize,
    /// Set when the data has zero total variance (then `d = 1`).
    pub degenerate: bool,
}

/// Smallest `m` whose top-`m` covariance eigenvalues carry a fraction
/// `≥ eps` of the variance.
pub fn effective_dimension(a: &Matrix, eps: f64) -> Result<EffectiveDimension> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("ε must lie in (0, 1], got {eps}")));
    }
    let p = pca(a)?;
    Ok(dimension_from_ratios(&p.cumulative_ratio(), p.total_variance(), eps))
}

pub(crate) fn dimension_from_ratios(cumulative: &[f64], total: f64, eps: f64) -> EffectiveDimension {
    if total <= 0.0 {
        return EffectiveDimension { d: 1, degenerate: true };
    }
    // ratios are sums of rounded terms; equal spectra land a few ulps short
    let d = cumulative.iter().position(|&r| r >= eps - 1e-10).map_or(cumulative.len(), |i| i + 1);
    EffectiveDimension { d: d.max(1), degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineStat {
    pub value: f64,
    /// Pairs averaged (enumerated or sampled).
    pub pairs: usize,
    pub exact: bool,
    pub std_error: f64,
    pub zero_vectors: usize,
}

/// Unit vectors grouped by token; zero vectors are dropped and counted.
struct TokenGroups {
    groups: Vec<Vec<Vec<f64>>>,
    zero_vectors: usize,
}

impl TokenGroups {
    fn build<'a>(by_token: impl Iterator<Item = Vec<&'a [f64]>>, shift: Option<&[f64]>) -> Self {
        let mut groups = Vec::new();
        let mut zero_vectors = 0;
        for instances in by_token {
            let mut g = Vec::with_capacity(instances.len());
            for v in instances {
                let v: Vec<f64> = match shift {
                    Some(mu) => v.iter().zip(mu).map(|(a, b)| a - b).collect(),
                    None => v.to_vec(),
                };
                let n = norm_sq(&v).sqrt();
                if n == 0.0 {
                    zero_vectors += 1;
                } else {
                    g.push(v.iter().map(|x| x / n).collect());
                }
            }
            if !g.is_empty() {
                groups.push(g);
            }
        }
        Self { groups, zero_vectors }
    }

    fn pair_cosine(&self, pair_budget: usize, rng: &mut RngStream) -> Option<CosineStat> {
        let k = self.groups.len();
        if k < 2 {
            return None;
        }
        let draw = |i: usize, j: usize, rng: &mut RngStream| {
            let a = &self.groups[i][rng.uniform_choice(self.groups[i].len())];
            let b = &self.groups[j][rng.uniform_choice(self.groups[j].len())];
            dot(a, b).clamp(-1.0, 1.0)
        };
        let total_pairs = k * (k - 1) / 2;
        let exact = total_pairs <= pair_budget;
        let mut values = Vec::with_capacity(total_pairs.min(pair_budget));
        if exact {
            for i in 0..k {
                for j in i + 1..k {
                    values.push(draw(i, j, rng));
                }
            }
        } else {
            for _ in 0..pair_budget {
                let i = rng.uniform_choice(k);
                let mut j = rng.uniform_choice(k - 1);
                if j >= i {
                    j += 1;
                }
                values.push(draw(i, j, rng));
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(CosineStat {
            value: mean,
            pairs: values.len(),
            exact,
            std_error: (var / n).sqrt(),
            zero_vectors: self.zero_vectors,
        })
    }
}

pub const DEFAULT_PAIR_BUDGET: usize = 10_000;

/// Expected cosine between instances of two distinct tokens.
///
/// Each pair draws a fresh instance of each token uniformly. All pairs are
/// enumerated when there are at most `pair_budget`; otherwise `pair_budget`
/// random pairs are sampled.
pub fn inter_token_cos(dump: &EmbeddingDump, layer: u32, pair_budget: usize, rng: &mut RngStream) -> Result<CosineStat> {
    let by_token = dump.by_token(layer);
    let groups = TokenGroups::build(
        by_token.values().map(|idx| idx.iter().map(|&i| dump.records[i].vector.as_slice()).collect()),
        None,
    );
    groups
        .pair_cosine(pair_budget.max(1), rng)
        .ok_or_else(|| Error::invalid(format!("layer {layer} has fewer than 2 tokens with nonzero vectors")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    pub wcss: f64,
    pub iterations: usize,
    pub mean_silhouette: Option<f64>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(x: &Matrix, k: usize, rng: &mut RngStream) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.uniform_choice(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.uniform_choice(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

/// Lloyd iterations from the given centroids. Returns the clustering and the
/// WCSS after every assignment step.
fn lloyd(x: &Matrix, mut centroids: Matrix, max_iter: usize, tol: f64) -> (Clustering, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let k = centroids.rows();
    let mut history = Vec::new();
    let mut assignment = vec![0; n];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let nearest_all = par::map_range(n, |i| nearest(x.row(i), &centroids));
        for (a, (c, _)) in assignment.iter_mut().zip(&nearest_all) {
            *a = *c;
        }
        let mut dist: Vec<f64> = nearest_all.iter().map(|p| p.1).collect();
        // repair empty clusters with the point farthest from its centroid
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(p) = far {
                counts[assignment[p]] -= 1;
                assignment[p] = c;
                counts[c] = 1;
                dist[p] = 0.0;
                centroids.row_mut(c).copy_from_slice(x.row(p));
            }
        }
        history.push(dist.iter().sum());

        let mut sums = Matrix::zeros(k, d);
        for (i, &a) in assignment.iter().enumerate() {
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift < tol || iterations >= max_iter {
            break;
        }
    }
    let wcss = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignment[i]))).sum();
    (Clustering { k, assignment, centroids, wcss, iterations, mean_silhouette: None }, history)
}

pub const KMEANS_RESTARTS: usize = 5;
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-8;

/// k-means++ seeding, Lloyd iterations, best of [`KMEANS_RESTARTS`] by WCSS.
pub fn kmeans(x: &Matrix, k: usize, rng: &mut RngStream) -> Result<Clustering> {
    if k < 1 || k > x.rows() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", x.rows())));
    }
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(x, k, rng);
        let (c, _) = lloyd(x, init, KMEANS_MAX_ITER, KMEANS_TOL);
        if best.as_ref().is_none_or(|b| c.wcss < b.wcss) {
            best = Some(c);
        }
    }
    Ok(best.unwrap())
}

/// WCSS after each assignment step of a single k-means++ run.
pub fn kmeans_wcss_trace(x: &Matrix, k: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if k < 1 || k > x.rows() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", x.rows())));
    }
    let init = plus_plus_init(x, k, rng);
    Ok(lloyd(x, init, KMEANS_MAX_ITER, KMEANS_TOL).1)
}

/// Per-point silhouette scores and their mean (Euclidean distances).
///
/// `b(p)` is the smallest *mean* distance to another non-empty cluster.
/// Singletons score 0.
pub fn silhouette(x: &Matrix, assignment: &[usize], k: usize) -> Result<(Vec<f64>, f64)> {
    let n = x.rows();
    if assignment.len() != n {
        return Err(Error::invalid("assignment length differs from point count"));
    }
    let mut counts = vec![0usize; k];
    for &a in assignment {
        if a >= k {
            return Err(Error::invalid(format!("cluster id {a} ≥ k = {k}")));
        }
        counts[a] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::invalid("silhouette needs at least two non-empty clusters"));
    }
    let scores = par::map_range(n, |p| {
        let mut sums = vec![0.0; k];
        for q in 0..n {
            if q != p {
                sums[assignment[q]] += sq_dist(x.row(p), x.row(q)).sqrt();
            }
        }
        let own = assignment[p];
        if counts[own] == 1 {
            return 0.0;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    let mean = scores.iter().sum::<f64>() / n as f64;
    Ok((scores, mean))
}

pub const LOW_SILHOUETTE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSelection {
    pub k: usize,
    pub clustering: Clustering,
    /// `(k, mean silhouette)` for every candidate.
    pub scores: Vec<(usize, f64)>,
    pub low_silhouette: bool,
}

/// Fit k-means for every `k` in the range and keep the highest mean
/// silhouette (ties → smallest `k`).
///
/// When `silhouette_points` is set and smaller than `n`, silhouettes are
/// evaluated on one fixed random subset of that many points.
pub fn select_cluster_count(
    x: &Matrix,
    k_range: std::ops::RangeInclusive<usize>,
    silhouette_points: Option<usize>,
    rng: &mut RngStream,
) -> Result<ClusterSelection> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo < 2 || hi < lo {
        return Err(Error::invalid(format!("cluster range {lo}..={hi} must start at 2 or more")));
    }
    if x.rows() < hi {
        return Err(Error::invalid(format!("{} points cannot form {hi} clusters", x.rows())));
    }
    let subset: Option<Vec<usize>> = match silhouette_points {
        Some(s) if s < x.rows() => {
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            rng.shuffle(&mut idx);
            idx.truncate(s.max(2));
            idx.sort_unstable();
            Some(idx)
        }
        _ => None,
    };
    let sub_x = subset.as_ref().map(|idx| x.select_rows(idx));
    let mut best: Option<(f64, Clustering)> = None;
    let mut scores = Vec::new();
    for k in k_range {
        let mut c = kmeans(x, k, rng)?;
        let mean = match (&subset, &sub_x) {
            (Some(idx), Some(sx)) => {
                let a: Vec<usize> = idx.iter().map(|&i| c.assignment[i]).collect();
                if a.iter().any(|&v| v != a[0]) {
                    silhouette(sx, &a, k)?.1
                } else {
                    0.0
                }
            }
            _ => silhouette(x, &c.assignment, k)?.1,
        };
        c.mean_silhouette = Some(mean);
        scores.push((k, mean));
        if best.as_ref().is_none_or(|(s, _)| mean > *s) {
            best = Some((mean, c));
        }
    }
    let (mean, clustering) = best.unwrap();
    Ok(ClusterSelection { k: clustering.k, clustering, scores, low_silhouette: mean < LOW_SILHOUETTE })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedCosine {
    pub value: f64,
    pub clusters_used: usize,
    /// Clusters with fewer than two distinct tokens.
    pub clusters_skipped: Vec<usize>,
    pub per_cluster: Vec<Option<f64>>,
    pub zero_vectors: usize,
}

/// Inter-token cosine after shifting every vector by its cluster's mean,
/// averaged over clusters. `assignment` indexes the layer's records in dump
/// order (as produced by [`EmbeddingDump::layer_matrix`]).
pub fn adjusted_inter_token_cos(
    dump: &EmbeddingDump,
    layer: u32,
    assignment: &[usize],
    k: usize,
    pair_budget: usize,
    rng: &mut RngStream,
) -> Result<AdjustedCosine> {
    let idx = dump.layer_indices(layer);
    if idx.len() != assignment.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} records, layer {layer} has {}",
            assignment.len(),
            idx.len()
        )));
    }
    let mut per_cluster = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    let mut zero_vectors = 0;
    for c in 0..k {
        let members: Vec<usize> = (0..idx.len()).filter(|&r| assignment[r] == c).collect();
        if members.is_empty() {
            skipped.push(c);
            per_cluster.push(None);
            continue;
        }
        let mut mean = vec![0.0; dump.dim];
        for &r in &members {
            for (m, v) in mean.iter_mut().zip(&dump.records[idx[r]].vector) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        let mut by_token: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
        for &r in &members {
            let rec = &dump.records[idx[r]];
            by_token.entry(rec.token_id).or_default().push(&rec.vector);
        }
        let groups = TokenGroups::build(by_token.into_values(), Some(&mean));
        zero_vectors += groups.zero_vectors;
        match groups.pair_cosine(pair_budget.max(1), rng) {
            Some(s) => per_cluster.push(Some(s.value)),
            None => {
                skipped.push(c);
                per_cluster.push(None);
            }
        }
    }
    let used: Vec<f64> = per_cluster.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "every cluster in layer {layer} has fewer than two distinct tokens"
        )));
    }
    Ok(AdjustedCosine {
        value: used.iter().sum::<f64>() / used.len() as f64,
        clusters_used: used.len(),
        clusters_skipped: skipped,
        per_cluster,
        zero_vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeConfig {
    pub pair_budget: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub silhouette_points: Option<usize>,
    pub seed: u64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { pair_budget: DEFAULT_PAIR_BUDGET, k_min: 2, k_max: 10, silhouette_points: Some(2000), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIsotropy {
    pub layer: u32,
    pub records: usize,
    pub d_08: usize,
    pub d_09: usize,
    pub degenerate: bool,
    pub zeta_cos: f64,
    pub chosen_k: usize,
    pub mean_silhouette: f64,
    pub low_silhouette: bool,
    pub zeta_prime_cos: f64,
    pub clusters_skipped: Vec<usize>,
    pub isotropy_partition: f64,
    pub zero_vectors: usize,
    pub explained_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub config: AnalyzeConfig,
    pub layers: Vec<LayerIsotropy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub layer: u32,
    pub pc: [f64; 3],
    pub cluster_id: usize,
    pub token_id: u32,
}

pub struct Analysis {
    pub report: IsotropyReport,
    pub plot: Vec<PlotRow>,
}

/// Full per-layer analysis. Layers run in parallel, each on its own stream.
pub fn analyze(dump: &EmbeddingDump, cfg: &AnalyzeConfig) -> Result<Analysis> {
    let layers = dump.layers();
    if layers.is_empty() {
        return Err(Error::invalid("embedding dump has no records"));
    }
    let results = par::map_slice(&layers, |&layer| analyze_layer(dump, layer, cfg));
    let mut report = IsotropyReport { config: *cfg, layers: Vec::new() };
    let mut plot = Vec::new();
    for r in results {
        let (l, rows) = r?;
        report.layers.push(l);
        plot.extend(rows);
    }
    Ok(Analysis { report, plot })
}

fn analyze_layer(dump: &EmbeddingDump, layer: u32, cfg: &AnalyzeConfig) -> Result<(LayerIsotropy, Vec<PlotRow>)> {
    let mut rng = RngStream::new(cfg.seed, stream_id(ISOTROPY_DOMAIN, layer as u64));
    let x = dump.layer_matrix(layer);
    let p = pca(&x)?;
    let cumulative = p.cumulative_ratio();
    let d08 = dimension_from_ratios(&cumulative, p.total_variance(), 0.8);
    let d09 = dimension_from_ratios(&cumulative, p.total_variance(), 0.9);
    let zeta = inter_token_cos(dump, layer, cfg.pair_budget, &mut rng)?;
    let k_max = cfg.k_max.min(x.rows());
    let sel = select_cluster_count(&x, cfg.k_min..=k_max, cfg.silhouette_points, &mut rng)?;
    let adj = adjusted_inter_token_cos(dump, layer, &sel.clustering.assignment, sel.k, cfg.pair_budget, &mut rng)?;
    let iso = isotropy_partition(&x)?;
    let proj = p.project(&x, 3);
    let idx = dump.layer_indices(layer);
    let plot = (0..x.rows())
        .map(|r| PlotRow {
            layer,
            pc: [proj.get(r, 0), proj.get(r, 1), proj.get(r, 2)],
            cluster_id: sel.clustering.assignment[r],
            token_id: dump.records[idx[r]].token_id,
        })
        .collect();
    let row = LayerIsotropy {
        layer,
        records: x.rows(),
        d_08: d08.d,
        d_09: d09.d,
        degenerate: d08.degenerate,
        zeta_cos: zeta.value,
        chosen_k: sel.k,
        mean_silhouette: sel.clustering.mean_silhouette.unwrap_or(0.0),
        low_silhouette: sel.low_silhouette,
        zeta_prime_cos: adj.value,
        clusters_skipped: adj.clusters_skipped,
        isotropy_partition: iso.value,
        zero_vectors: zeta.zero_vectors,
        explained_ratio: p.explained_ratio.clone(),
    };
    Ok((row, plot))
}
