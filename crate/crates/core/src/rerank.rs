//! k-reciprocal encoding re-ranking.
//!
//! Queries and gallery are pooled into one set of `N = n_q + n_g` items with
//! pairwise distances. Each item gets a k-reciprocal neighbour set, expanded
//! with the half-size reciprocal sets of its members when they overlap by
//! more than two thirds, and encoded as a sparse vector with weights
//! `exp(-d)`. After averaging each vector over its `k2` nearest items, the
//! Jaccard distance between encodings is mixed with the original distance:
//! `final = lambda * d + (1 - lambda) * d_jaccard`.

use rayon::prelude::*;

use crate::error::{precondition, profile_mismatch, Result};
use crate::matching::{SimilarityMatrix, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self { k1: 20, k2: 6, lambda: 0.3 }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return precondition(format!("need 1 <= k2 <= k1, got k1={} k2={}", self.k1, self.k2));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return precondition(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

/// Distances as `f64`: `1 − p` for probabilities, unchanged for distances.
pub fn to_distances(m: &SimilarityMatrix) -> Result<Vec<f64>> {
    match m.stage() {
        Stage::Probability => Ok(m.scores().iter().map(|&p| 1.0 - f64::from(p)).collect()),
        Stage::RerankedDistance => Ok(m.scores().iter().map(|&d| f64::from(d)).collect()),
        other => precondition(format!("re-ranking needs probabilities or distances, got {other:?}")),
    }
}

/// Indices `0..n` sorted by ascending `row[k]`, ties to the lower index.
fn argsort(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// Members of `i`'s `k`-nearest list that also hold `i` in their own
/// `k`-nearest list, in `i`'s rank order. Lists include the item itself.
pub fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    let forward = &ranks[i][..(k + 1).min(ranks[i].len())];
    forward
        .iter()
        .copied()
        .filter(|&c| ranks[c][..(k + 1).min(ranks[c].len())].contains(&i))
        .collect()
}

fn half_k(k1: usize) -> usize {
    (k1 as f64 / 2.0).round_ties_even() as usize
}

/// Refines query→gallery distances using the within-set matrices `qq` and
/// `gg`. The diagonals of `qq` and `gg` are treated as zero distance.
pub fn k_reciprocal_rerank(
    qg: &SimilarityMatrix,
    qq: &SimilarityMatrix,
    gg: &SimilarityMatrix,
    params: &RerankParams,
) -> Result<SimilarityMatrix> {
    params.validate()?;
    let nq = qg.n_query();
    let ng = qg.n_gallery();
    if qq.n_query() != nq || qq.n_gallery() != nq || gg.n_query() != ng || gg.n_gallery() != ng {
        return profile_mismatch(format!(
            "qg {nq}x{ng} needs qq {nq}x{nq} and gg {ng}x{ng}, got {}x{} and {}x{}",
            qq.n_query(),
            qq.n_gallery(),
            gg.n_query(),
            gg.n_gallery()
        ));
    }
    let d_qg = to_distances(qg)?;
    let d_qq = to_distances(qq)?;
    let d_gg = to_distances(gg)?;

    let n = nq + ng;
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = match (i < nq, j < nq) {
                _ if i == j => 0.0,
                (true, true) => d_qq[i * nq + j],
                (true, false) => d_qg[i * ng + (j - nq)],
                (false, true) => d_qg[j * ng + (i - nq)],
                (false, false) => d_gg[(i - nq) * ng + (j - nq)],
            };
        }
    }

    let ranks: Vec<Vec<usize>> = (0..n).into_par_iter().map(|i| argsort(&dist[i * n..(i + 1) * n])).collect();
    let k1 = params.k1;
    let k_half = half_k(k1);

    let encodings: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let recip = k_reciprocal(&ranks, i, k1);
            let mut expansion = recip.clone();
            for &c in &recip {
                let cand = k_reciprocal(&ranks, c, k_half);
                let overlap = cand.iter().filter(|x| recip.contains(x)).count();
                if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    expansion.extend(cand);
                }
            }
            expansion.sort_unstable();
            expansion.dedup();
            let weights: Vec<f64> = expansion.iter().map(|&j| (-dist[i * n + j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut v = vec![0.0; n];
            for (&j, w) in expansion.iter().zip(weights) {
                v[j] = w / total;
            }
            v
        })
        .collect();

    let encodings = if params.k2 == 1 {
        encodings
    } else {
        let k2 = params.k2.min(n);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut v = vec![0.0; n];
                for &nb in &ranks[i][..k2] {
                    for (acc, x) in v.iter_mut().zip(&encodings[nb]) {
                        *acc += x;
                    }
                }
                v.iter_mut().for_each(|x| *x /= k2 as f64);
                v
            })
            .collect()
    };

    let lambda = params.lambda;
    let rows: Vec<Vec<f32>> = (0..nq)
        .into_par_iter()
        .map(|i| {
            (nq..n)
                .map(|j| {
                    let shared: f64 = encodings[i].iter().zip(&encodings[j]).map(|(a, b)| a.min(*b)).sum();
                    let jaccard = 1.0 - shared / (2.0 - shared);
                    (lambda * dist[i * n + j] + (1.0 - lambda) * jaccard) as f32
                })
                .collect()
        })
        .collect();
    SimilarityMatrix::new(nq, ng, Stage::RerankedDistance, rows.concat())
}
