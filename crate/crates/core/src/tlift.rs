//! Temporal lifting: re-weights appearance scores with a temporal probability
//! estimated from the query's nearby persons and their top gallery matches.
//!
//! For a query `A` in camera `Q`, the nearby set `R` holds every query-side
//! record of `Q` within `tau` seconds of `A`. For each gallery camera `G`,
//! the `K` best gallery entries of `G` over all of `R` become pivots, and
//! every entry `X` of `G` receives
//! `p_t(A, X) = mean_{B in P} exp(-(t_B - t_X)^2 / sigma^2)`.
//! The fused score is `(p_t + alpha) * p_a`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{precondition, profile_mismatch, Error, Result};
use crate::matching::{SimilarityMatrix, Stage};
use crate::store::MetaRecord;

/// Guard added to the per-row range when mapping distances to `[0, 1]`.
pub const DISTANCE_RANGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TLiftParams {
    /// Nearby-person threshold, seconds.
    pub tau: f64,
    /// Kernel sensitivity, seconds.
    pub sigma: f64,
    /// Pivot count.
    pub k: usize,
    pub alpha: f64,
    /// When false, gallery entries in the query's own camera get `p_t = 0`.
    pub include_query_camera: bool,
}

impl Default for TLiftParams {
    fn default() -> Self {
        Self { tau: 100.0, sigma: 200.0, k: 10, alpha: 0.2, include_query_camera: true }
    }
}

impl TLiftParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma > 0.0) {
            return precondition(format!("tau and sigma must be positive, got {} and {}", self.tau, self.sigma));
        }
        if self.k == 0 {
            return precondition("pivot count K must be at least 1");
        }
        if !(self.alpha >= 0.0) {
            return precondition(format!("alpha must be non-negative, got {}", self.alpha));
        }
        Ok(())
    }
}

fn times(meta: &[MetaRecord], side: &str) -> Result<Vec<f64>> {
    meta.iter()
        .enumerate()
        .map(|(k, m)| {
            m.time.ok_or_else(|| {
                Error::Precondition(format!(
                    "{side} record {k} has no timestamp; temporal lifting needs frame and fps for every record"
                ))
            })
        })
        .collect()
}

/// Records in the query's camera strictly within `tau` seconds of it,
/// including the query itself.
pub fn nearby_set(query: usize, meta: &[MetaRecord], tau: f64) -> Result<Vec<usize>> {
    let t = times(meta, "query")?;
    Ok(nearby_from_times(query, meta, &t, tau))
}

fn nearby_from_times(query: usize, meta: &[MetaRecord], t: &[f64], tau: f64) -> Vec<usize> {
    let cam = meta[query].camera;
    (0..meta.len())
        .filter(|&b| b == query || (meta[b].camera == cam && (t[b] - t[query]).abs() < tau))
        .collect()
}

/// Top-`k` distinct gallery entries among `candidates` ranked by their best
/// score over any member of `members`; ties go to the lower gallery index.
/// `appearance` is a row-major `_ × n_gallery` table.
pub fn pivot_set(members: &[usize], candidates: &[usize], appearance: &[f64], n_gallery: usize, k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&j| {
            let s = members.iter().map(|&r| appearance[r * n_gallery + j]).fold(f64::NEG_INFINITY, f64::max);
            (s, j)
        })
        .collect();
    best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    best.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Gaussian-kernel temporal probability of `x_time` given pivot times.
/// `None` when there are no pivots.
pub fn temporal_probability(pivot_times: &[f64], x_time: f64, sigma: f64) -> Option<f64> {
    if pivot_times.is_empty() {
        return None;
    }
    let s2 = sigma * sigma;
    let sum: f64 = pivot_times.iter().map(|&t| (-(t - x_time).powi(2) / s2).exp()).sum();
    Some(sum / pivot_times.len() as f64)
}

/// Appearance probabilities in `[0, 1]` from a probability or re-ranked
/// distance matrix. Distances are mapped per row by
/// `1 − (d − min) / (max − min + eps)`.
pub fn appearance_probabilities(scores: &SimilarityMatrix) -> Result<Vec<f64>> {
    match scores.stage() {
        Stage::Probability => Ok(scores.scores().iter().map(|&p| f64::from(p)).collect()),
        Stage::RerankedDistance => {
            let mut out = Vec::with_capacity(scores.scores().len());
            for row in scores.rows() {
                let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| {
                    (lo.min(f64::from(d)), hi.max(f64::from(d)))
                });
                let range = hi - lo + DISTANCE_RANGE_EPS;
                out.extend(row.iter().map(|&d| 1.0 - (f64::from(d) - lo) / range));
            }
            Ok(out)
        }
        other => precondition(format!("temporal lifting needs probabilities or re-ranked distances, got {other:?}")),
    }
}

/// Multiplies every appearance score by `p_t + alpha`.
pub fn tlift_fuse(
    scores: &SimilarityMatrix,
    query_meta: &[MetaRecord],
    gallery_meta: &[MetaRecord],
    params: &TLiftParams,
) -> Result<SimilarityMatrix> {
    params.validate()?;
    let nq = scores.n_query();
    let ng = scores.n_gallery();
    if query_meta.len() != nq || gallery_meta.len() != ng {
        return profile_mismatch(format!(
            "{nq}x{ng} scores with {} query and {} gallery records",
            query_meta.len(),
            gallery_meta.len()
        ));
    }
    let qt = times(query_meta, "query")?;
    let gt = times(gallery_meta, "gallery")?;
    let appearance = appearance_probabilities(scores)?;

    let mut cameras: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (j, m) in gallery_meta.iter().enumerate() {
        cameras.entry(m.camera).or_default().push(j);
    }

    let rows: Vec<Vec<f32>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            let members = nearby_from_times(i, query_meta, &qt, params.tau);
            let mut temporal = vec![0.0f64; ng];
            for (&cam, entries) in &cameras {
                if cam == query_meta[i].camera && !params.include_query_camera {
                    continue;
                }
                let pivots = pivot_set(&members, entries, &appearance, ng, params.k);
                let pivot_times: Vec<f64> = pivots.iter().map(|&b| gt[b]).collect();
                for &j in entries {
                    temporal[j] = temporal_probability(&pivot_times, gt[j], params.sigma).unwrap_or(0.0);
                }
            }
            (0..ng).map(|j| ((temporal[j] + params.alpha) * appearance[i * ng + j]) as f32).collect()
        })
        .collect();
    SimilarityMatrix::new(nq, ng, Stage::Tlifted, rows.concat())
}
