//! Pairwise and batched QAConv scoring.
//!
//! A pair of normalized feature maps is turned into a `2hw` pooled similarity
//! vector by [`qaconv_raw_similarity`]; the BN-FC-BN head in [`HeadParams`]
//! maps that vector to a matching probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{precondition, profile_mismatch, Result};
use crate::store::GalleryStore;
use crate::tensor::{
    adaptive_convolve, extract_query_kernel, global_max_pool_bidirectional, FeatureMap, PooledSimilarity, QueryKernel,
};

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Largest `f32` strictly below one.
const F32_BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One-dimensional batch normalization over `len` independent features.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(len: usize) -> Self {
        Self {
            scale: vec![1.0; len],
            shift: vec![0.0; len],
            running_mean: vec![0.0; len],
            running_var: vec![1.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    #[inline]
    fn apply_running(&self, k: usize, x: f64) -> f64 {
        (x - self.running_mean[k]) / (self.running_var[k] + BN_EPS).sqrt() * self.scale[k] + self.shift[k]
    }

    fn update_running(&mut self, k: usize, mean: f64, biased_var: f64, n: usize, momentum: f64) {
        let unbiased = biased_var * n as f64 / (n - 1) as f64;
        self.running_mean[k] = (1.0 - momentum) * self.running_mean[k] + momentum * mean;
        self.running_var[k] = (1.0 - momentum) * self.running_var[k] + momentum * unbiased;
    }
}

/// Trainable parameters and running statistics of the BN-FC-BN head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub bn1: BatchNorm,
    pub fc_weight: Vec<f64>,
    pub fc_bias: f64,
    pub bn2: BatchNorm,
    pub momentum: f64,
    pub mode: Mode,
}

/// Intermediate values of a train-mode forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// Per-row BN1-normalized features before scale/shift.
    pub normalized: Vec<Vec<f64>>,
    pub bn1_inv_std: Vec<f64>,
    pub logits: Vec<f64>,
    pub logit_normalized: Vec<f64>,
    pub bn2_inv_std: f64,
    pub probabilities: Vec<f64>,
}

impl HeadParams {
    /// Identity batch norms, zero FC weights: every pair scores 0.5.
    pub fn zeros(n_features: usize) -> Self {
        Self {
            bn1: BatchNorm::identity(n_features),
            fc_weight: vec![0.0; n_features],
            fc_bias: 0.0,
            bn2: BatchNorm::identity(1),
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Eval,
        }
    }

    /// Untrained head that scores a pair by the sigmoid of its mean pooled
    /// similarity.
    pub fn mean_pooling(n_features: usize) -> Self {
        let mut head = Self::zeros(n_features);
        head.fc_weight = vec![1.0 / n_features as f64; n_features];
        head
    }

    /// Training initialization: identity batch norms, FC weights uniform in
    /// `±1/sqrt(n)`.
    pub fn init(n_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (n_features as f64).sqrt();
        let mut head = Self::zeros(n_features);
        head.fc_weight = (0..n_features).map(|_| rng.gen_range(-bound..bound)).collect();
        head.mode = Mode::Train;
        head
    }

    pub fn n_features(&self) -> usize {
        self.fc_weight.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_features();
        if self.bn1.len() != n || self.bn1.shift.len() != n || self.bn1.running_mean.len() != n || self.bn1.running_var.len() != n {
            return profile_mismatch(format!("bn1 does not cover {n} features"));
        }
        if self.bn2.len() != 1 || self.bn2.shift.len() != 1 || self.bn2.running_mean.len() != 1 || self.bn2.running_var.len() != 1 {
            return profile_mismatch("bn2 must be scalar");
        }
        if self.bn1.running_var.iter().chain(&self.bn2.running_var).any(|&v| !(v >= 0.0)) {
            return precondition("running variances must be non-negative");
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return precondition(format!("momentum must lie in (0, 1), got {}", self.momentum));
        }
        Ok(())
    }

    /// Pre-sigmoid logit of a single vector using running statistics.
    pub fn logit_eval(&self, v: &[f64]) -> f64 {
        let z = v
            .iter()
            .enumerate()
            .map(|(k, &x)| self.fc_weight[k] * self.bn1.apply_running(k, x))
            .sum::<f64>()
            + self.fc_bias;
        self.bn2.apply_running(0, z)
    }

    /// Eval-mode probability of a single pooled vector.
    pub fn probability(&self, v: &[f64]) -> f64 {
        sigmoid(self.logit_eval(v))
    }

    /// Runs the head over a batch. In train mode batch statistics are used
    /// and the running statistics are updated.
    pub fn forward(&mut self, batch: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self.mode {
            Mode::Eval => {
                self.check_batch(batch)?;
                Ok(batch.iter().map(|v| self.probability(v)).collect())
            }
            Mode::Train => Ok(self.forward_train(batch)?.probabilities),
        }
    }

    /// Train-mode forward pass returning every intermediate for backward.
    pub fn forward_train(&mut self, batch: &[Vec<f64>]) -> Result<HeadTrace> {
        self.check_batch(batch)?;
        if batch.len() < 2 {
            return precondition("train-mode forward needs a batch of at least 2");
        }
        let trace = self.trace(batch);
        let n = batch.len();
        let nf = self.n_features();
        for k in 0..nf {
            let (mean, var) = mean_var(batch.iter().map(|v| v[k]));
            self.bn1.update_running(k, mean, var, n, self.momentum);
        }
        let (mean, var) = mean_var(trace.logits.iter().copied());
        self.bn2.update_running(0, mean, var, n, self.momentum);
        Ok(trace)
    }

    /// Train-mode evaluation without touching running statistics.
    pub fn trace(&self, batch: &[Vec<f64>]) -> HeadTrace {
        let n = batch.len();
        let nf = self.n_features();
        let mut normalized = vec![vec![0.0; nf]; n];
        let mut bn1_inv_std = vec![0.0; nf];
        for k in 0..nf {
            let (mean, var) = mean_var(batch.iter().map(|v| v[k]));
            let inv = 1.0 / (var + BN_EPS).sqrt();
            bn1_inv_std[k] = inv;
            for (row, v) in normalized.iter_mut().zip(batch) {
                row[k] = (v[k] - mean) * inv;
            }
        }
        let logits: Vec<f64> = normalized
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, &x)| self.fc_weight[k] * (x * self.bn1.scale[k] + self.bn1.shift[k]))
                    .sum::<f64>()
                    + self.fc_bias
            })
            .collect();
        let (mean, var) = mean_var(logits.iter().copied());
        let bn2_inv_std = 1.0 / (var + BN_EPS).sqrt();
        let logit_normalized: Vec<f64> = logits.iter().map(|&z| (z - mean) * bn2_inv_std).collect();
        let probabilities = logit_normalized
            .iter()
            .map(|&z| sigmoid(z * self.bn2.scale[0] + self.bn2.shift[0]))
            .collect();
        HeadTrace { normalized, bn1_inv_std, logits, logit_normalized, bn2_inv_std, probabilities }
    }

    fn check_batch(&self, batch: &[Vec<f64>]) -> Result<()> {
        let n = self.n_features();
        if let Some(v) = batch.iter().find(|v| v.len() != n) {
            return profile_mismatch(format!("head expects {n} features, got {}", v.len()));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean and biased variance.
fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (sum, n) = xs.clone().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    let mean = sum / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Processing stage of a [`SimilarityMatrix`], which decides whether higher
/// or lower entries mean "more similar".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Probability,
    RerankedDistance,
    Tlifted,
}

impl Stage {
    pub fn tag(self) -> u32 {
        match self {
            Stage::Raw => 0,
            Stage::Probability => 1,
            Stage::RerankedDistance => 2,
            Stage::Tlifted => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Stage::Raw,
            1 => Stage::Probability,
            2 => Stage::RerankedDistance,
            3 => Stage::Tlifted,
            _ => return None,
        })
    }

    pub fn is_distance(self) -> bool {
        self == Stage::RerankedDistance
    }
}

/// Dense query × gallery score table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n_query: usize,
    n_gallery: usize,
    stage: Stage,
    scores: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn new(n_query: usize, n_gallery: usize, stage: Stage, scores: Vec<f32>) -> Result<Self> {
        if scores.len() != n_query * n_gallery {
            return profile_mismatch(format!(
                "{n_query}x{n_gallery} matrix needs {} scores, got {}",
                n_query * n_gallery,
                scores.len()
            ));
        }
        Ok(Self { n_query, n_gallery, stage, scores })
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_gallery(&self) -> usize {
        self.n_gallery
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.n_gallery + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.scores[i * self.n_gallery..(i + 1) * self.n_gallery]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.scores.chunks_exact(self.n_gallery.max(1)).take(self.n_query)
    }
}

/// `extract_query_kernel → adaptive_convolve → global_max_pool_bidirectional`
/// on two normalized maps of the same profile.
pub fn qaconv_raw_similarity(query: &FeatureMap, gallery: &FeatureMap, s: usize) -> Result<PooledSimilarity> {
    check_profiles(query, gallery)?;
    let kernel = extract_query_kernel(query, s)?;
    pooled_with_kernel(&kernel, gallery)
}

fn pooled_with_kernel(kernel: &QueryKernel, gallery: &FeatureMap) -> Result<PooledSimilarity> {
    global_max_pool_bidirectional(&adaptive_convolve(kernel, gallery)?)
}

fn check_profiles(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.profile() != b.profile() {
        return profile_mismatch(format!("query profile {:?} vs gallery {:?}", a.profile(), b.profile()));
    }
    Ok(())
}

fn widen(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

/// Stores a head probability as `f32` strictly inside `(0, 1)`.
fn store_probability(p: f64) -> f32 {
    (p as f32).clamp(f32::MIN_POSITIVE, F32_BELOW_ONE)
}

/// Probability that `query` and `gallery` show the same identity.
pub fn pair_probability(query: &FeatureMap, gallery: &FeatureMap, head: &HeadParams, s: usize) -> Result<f32> {
    let pooled = qaconv_raw_similarity(query, gallery, s)?;
    if pooled.values.len() != head.n_features() {
        return profile_mismatch(format!("head expects {} features, pair gives {}", head.n_features(), pooled.values.len()));
    }
    Ok(store_probability(head.probability(&widen(&pooled.values))))
}

/// Scores every query against every gallery entry with an eval-mode head.
///
/// Each cell is computed independently, so the output is bitwise identical
/// for any `workers` count.
pub fn match_batch(
    queries: &GalleryStore,
    gallery: &GalleryStore,
    head: &HeadParams,
    s: usize,
    workers: usize,
) -> Result<SimilarityMatrix> {
    if queries.is_empty() || gallery.is_empty() {
        return precondition("query and gallery stores must be non-empty");
    }
    if head.mode != Mode::Eval {
        return precondition("batched matching needs an eval-mode head");
    }
    head.validate()?;
    let q_profile = queries.profile().unwrap_or_default();
    let g_profile = gallery.profile().unwrap_or_default();
    if q_profile != g_profile {
        return profile_mismatch(format!("query profile {q_profile:?} vs gallery {g_profile:?}"));
    }
    let (_, h, w) = q_profile;
    if head.n_features() != 2 * h * w {
        return profile_mismatch(format!("head expects {} features, profile gives {}", head.n_features(), 2 * h * w));
    }
    let kernels = queries
        .maps()
        .iter()
        .map(|q| extract_query_kernel(q, s))
        .collect::<Result<Vec<_>>>()?;

    let score_row = |kernel: &QueryKernel| -> Result<Vec<f32>> {
        gallery
            .maps()
            .iter()
            .map(|g| {
                let pooled = pooled_with_kernel(kernel, g)?;
                Ok(store_probability(head.probability(&widen(&pooled.values))))
            })
            .collect()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| crate::Error::Precondition(format!("cannot start worker pool: {e}")))?;
    let rows: Vec<Vec<f32>> = pool.install(|| kernels.par_iter().map(score_row).collect::<Result<_>>())?;
    SimilarityMatrix::new(queries.len(), gallery.len(), Stage::Probability, rows.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    QueryToGallery,
    GalleryToQuery,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// `(y, x)` in the query map.
    pub query: (usize, usize),
    /// `(y, x)` in the gallery map.
    pub gallery: (usize, usize),
    pub score: f32,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub probability: f32,
    pub correspondences: Vec<Correspondence>,
}

impl CorrespondenceSet {
    /// Correspondences with exact duplicate `(query, gallery)` location pairs
    /// removed; the first occurrence (query-side pooling first) is kept.
    pub fn distinct_pairs(&self) -> Vec<&Correspondence> {
        let mut seen = std::collections::HashSet::new();
        self.correspondences.iter().filter(|c| seen.insert((c.query, c.gallery))).collect()
    }
}

/// Lists local correspondences whose pooled score exceeds `threshold`, from
/// both pooling directions.
pub fn interpret(
    query: &FeatureMap,
    gallery: &FeatureMap,
    head: &HeadParams,
    threshold: f32,
    s: usize,
) -> Result<CorrespondenceSet> {
    let pooled = qaconv_raw_similarity(query, gallery, s)?;
    if pooled.values.len() != head.n_features() {
        return profile_mismatch(format!("head expects {} features, pair gives {}", head.n_features(), pooled.values.len()));
    }
    let probability = store_probability(head.probability(&widen(&pooled.values)));
    let w = query.width();
    let loc = |i: usize| (i / w, i % w);
    let hw = pooled.half();
    let mut correspondences = Vec::new();
    for (k, (&score, &arg)) in pooled.values.iter().zip(&pooled.argmax).enumerate() {
        if score <= threshold {
            continue;
        }
        correspondences.push(if k < hw {
            Correspondence { query: loc(k), gallery: loc(arg), score, direction: Direction::QueryToGallery }
        } else {
            Correspondence { query: loc(arg), gallery: loc(k - hw), score, direction: Direction::GalleryToQuery }
        });
    }
    Ok(CorrespondenceSet { probability, correspondences })
}
