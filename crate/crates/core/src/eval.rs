//! Single-query CMC and mAP.

use crate::error::{precondition, profile_mismatch, Result};
use crate::matching::SimilarityMatrix;
use crate::store::MetaRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `cmc[r - 1]` is the rank-`r` accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub n_valid_queries: usize,
}

impl EvalReport {
    /// Rank-`r` accuracy (1-based); ranks past the table saturate.
    pub fn rank(&self, r: usize) -> f64 {
        assert!(r >= 1, "ranks are 1-based");
        self.cmc[(r - 1).min(self.cmc.len() - 1)]
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = format!("n_valid_queries={}\nmap={:.6}\n", self.n_valid_queries, self.map);
        for r in [1, 5, 10, 20] {
            if r <= self.cmc.len() {
                out.push_str(&format!("rank{r}={:.6}\n", self.rank(r)));
            }
        }
        out
    }

    /// `rank,cmc` table with one row per rank.
    pub fn to_table(&self) -> String {
        let mut out = String::from("rank,cmc\n");
        for (r, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", r + 1, v));
        }
        out
    }
}

/// Converts a frame number to seconds.
pub fn frames_to_seconds(frame: i64, fps: f64) -> Result<f64> {
    if !(fps > 0.0) || !fps.is_finite() {
        return precondition(format!("fps must be positive, got {fps}"));
    }
    Ok(frame as f64 / fps)
}

/// Evaluates a score matrix under the single-query protocol: gallery
/// entries sharing both identity and camera with the query are ignored, and
/// queries left without a positive are skipped. Distance-stage matrices are
/// ranked ascending, all others descending; ties go to the lower gallery
/// index.
pub fn evaluate(
    scores: &SimilarityMatrix,
    query_meta: &[MetaRecord],
    gallery_meta: &[MetaRecord],
    r_max: usize,
) -> Result<EvalReport> {
    if r_max == 0 {
        return precondition("r_max must be at least 1");
    }
    if query_meta.len() != scores.n_query() || gallery_meta.len() != scores.n_gallery() {
        return profile_mismatch(format!(
            "{}x{} scores with {} query and {} gallery records",
            scores.n_query(),
            scores.n_gallery(),
            query_meta.len(),
            gallery_meta.len()
        ));
    }
    let sign = if scores.stage().is_distance() { -1.0f32 } else { 1.0 };
    let mut hits = vec![0usize; r_max];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(scores.n_gallery());
    for (q, row) in scores.rows().enumerate() {
        let qm = &query_meta[q];
        order.clear();
        order.extend(
            (0..row.len()).filter(|&j| !(gallery_meta[j].identity == qm.identity && gallery_meta[j].camera == qm.camera)),
        );
        // `+ 0.0` folds -0.0 into 0.0 so total_cmp treats them as ties
        let key = |j: usize| sign * row[j] + 0.0;
        order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));

        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &j) in order.iter().enumerate() {
            if gallery_meta[j].identity == qm.identity {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        let Some(first) = first else { continue };
        valid += 1;
        ap_sum += precision_sum / found as f64;
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    if valid == 0 {
        return precondition("no query has a cross-camera positive in the gallery");
    }
    Ok(EvalReport {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: ap_sum / valid as f64,
        n_valid_queries: valid,
    })
}
