use crate::error::{precondition, profile_mismatch, Result};
use crate::eval::frames_to_seconds;
use crate::tensor::{FeatureMap, NORM_EPS};

/// Per-image metadata: identity, camera and capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub identity: i64,
    pub camera: i64,
    /// Source frame and frames-per-second, kept for provenance.
    pub frame: Option<(i64, f64)>,
    /// Capture time in seconds, derived from `frame` or set directly.
    pub time: Option<f64>,
}

impl MetaRecord {
    pub fn new(identity: i64, camera: i64) -> Self {
        Self { identity, camera, frame: None, time: None }
    }

    pub fn with_frame(mut self, frame: i64, fps: f64) -> Result<Self> {
        self.time = Some(frames_to_seconds(frame, fps)?);
        self.frame = Some((frame, fps));
        Ok(self)
    }

    pub fn with_time(mut self, seconds: f64) -> Result<Self> {
        if !seconds.is_finite() {
            return precondition(format!("time must be finite, got {seconds}"));
        }
        self.time = Some(seconds);
        Ok(self)
    }
}

/// Ordered feature maps sharing one `(d, h, w)` profile, with optional
/// per-sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryStore {
    maps: Vec<FeatureMap>,
    meta: Option<Vec<MetaRecord>>,
}

impl GalleryStore {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if let Some(first) = maps.first() {
            let profile = first.profile();
            if let Some((k, m)) = maps.iter().enumerate().find(|(_, m)| m.profile() != profile) {
                return profile_mismatch(format!(
                    "sample {k} has profile {:?}, expected {:?}",
                    m.profile(),
                    profile
                ));
            }
        }
        Ok(Self { maps, meta: None })
    }

    pub fn with_meta(mut self, meta: Vec<MetaRecord>) -> Result<Self> {
        if meta.len() != self.maps.len() {
            return profile_mismatch(format!(
                "{} metadata records for {} samples",
                meta.len(),
                self.maps.len()
            ));
        }
        self.meta = Some(meta);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn meta(&self) -> Option<&[MetaRecord]> {
        self.meta.as_deref()
    }

    pub fn profile(&self) -> Option<(usize, usize, usize)> {
        self.maps.first().map(FeatureMap::profile)
    }

    /// Returns a copy with every map's channel vectors l2-normalized.
    pub fn normalized(&self) -> GalleryStore {
        GalleryStore {
            maps: self.maps.iter().map(|m| m.l2_normalize_channels(NORM_EPS)).collect(),
            meta: self.meta.clone(),
        }
    }
}
