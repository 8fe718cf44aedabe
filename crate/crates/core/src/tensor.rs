//! Dense feature-map operations behind query-adaptive convolution.
//!
//! All spatial locations are flattened row-major (`i = y * w + x`), and all
//! reductions accumulate in `f64` before being stored back as `f32`.

use crate::error::{precondition, profile_mismatch, Result};

/// Default guard used by [`FeatureMap::l2_normalize_channels`].
pub const NORM_EPS: f32 = 1e-12;

/// One image's `d × h × w` feature tensor, stored channel-major:
/// `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(d: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if d == 0 || h == 0 || w == 0 {
            return precondition(format!("feature map dims must be positive, got {d}x{h}x{w}"));
        }
        if data.len() != d * h * w {
            return profile_mismatch(format!(
                "feature map {d}x{h}x{w} needs {} values, got {}",
                d * h * w,
                data.len()
            ));
        }
        Ok(Self { d, h, w, data })
    }

    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        assert!(d > 0 && h > 0 && w > 0, "feature map dims must be positive");
        Self { d, h, w, data: vec![0.0; d * h * w] }
    }

    /// Builds a map from per-location channel vectors given in row-major
    /// location order.
    pub fn from_locations(h: usize, w: usize, locations: &[Vec<f32>]) -> Result<Self> {
        if locations.len() != h * w {
            return profile_mismatch(format!("expected {} locations, got {}", h * w, locations.len()));
        }
        let d = locations.first().map_or(0, Vec::len);
        let mut data = vec![0.0; d * h * w];
        for (i, v) in locations.iter().enumerate() {
            if v.len() != d {
                return profile_mismatch("location vectors differ in length");
            }
            for (c, &x) in v.iter().enumerate() {
                data[c * h * w + i] = x;
            }
        }
        Self::new(d, h, w, data)
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `(d, h, w)`
    pub fn profile(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn locations(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Channel vector at flat location `i`.
    pub fn location_vector(&self, i: usize) -> Vec<f32> {
        let hw = self.locations();
        (0..self.d).map(|c| self.data[c * hw + i]).collect()
    }

    /// Divides every location's channel vector by `max(‖v‖₂, eps)`.
    pub fn l2_normalize_channels(&self, eps: f32) -> FeatureMap {
        let hw = self.locations();
        let mut norms = vec![0.0f64; hw];
        for channel in self.data.chunks_exact(hw) {
            for (n, &x) in norms.iter_mut().zip(channel) {
                *n += f64::from(x) * f64::from(x);
            }
        }
        let eps = f64::from(eps);
        let divisors: Vec<f64> = norms.into_iter().map(|n| n.sqrt().max(eps)).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for channel in self.data.chunks_exact(hw) {
            data.extend(channel.iter().zip(&divisors).map(|(&x, &n)| (f64::from(x) / n) as f32));
        }
        FeatureMap { d: self.d, h: self.h, w: self.w, data }
    }
}

/// `hw` convolution kernels of shape `[d, s, s]`, one per query location.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryKernel {
    hw: usize,
    d: usize,
    s: usize,
    weights: Vec<f32>,
}

impl QueryKernel {
    pub fn count(&self) -> usize {
        self.hw
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn size(&self) -> usize {
        self.s
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Weights of kernel `i`, laid out `[d][s][s]`.
    pub fn kernel(&self, i: usize) -> &[f32] {
        let len = self.d * self.s * self.s;
        &self.weights[i * len..(i + 1) * len]
    }
}

/// Convolution output `[hw_q, h_g, w_g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    hw_q: usize,
    h_g: usize,
    w_g: usize,
    values: Vec<f32>,
}

impl SimilarityMap {
    pub fn new(hw_q: usize, h_g: usize, w_g: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != hw_q * h_g * w_g {
            return profile_mismatch(format!(
                "similarity map {hw_q}x{h_g}x{w_g} needs {} values, got {}",
                hw_q * h_g * w_g,
                values.len()
            ));
        }
        Ok(Self { hw_q, h_g, w_g, values })
    }

    pub fn query_locations(&self) -> usize {
        self.hw_q
    }

    pub fn gallery_height(&self) -> usize {
        self.h_g
    }

    pub fn gallery_width(&self) -> usize {
        self.w_g
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Similarity between query location `i` and gallery location `j` (flat).
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.h_g * self.w_g + j]
    }
}

/// The `2hw` pooled similarity vector plus the location that attained each
/// maximum. Entries `0..hw` are query-side (argmax is a gallery location),
/// entries `hw..2hw` are gallery-side (argmax is a query location).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSimilarity {
    pub values: Vec<f32>,
    pub argmax: Vec<usize>,
}

impl PooledSimilarity {
    pub fn half(&self) -> usize {
        self.values.len() / 2
    }
}

/// Extracts zero-padded `s × s` patches at every query location.
pub fn extract_query_kernel(fm: &FeatureMap, s: usize) -> Result<QueryKernel> {
    if s % 2 == 0 {
        return precondition(format!("kernel size must be odd, got {s}"));
    }
    // with zero padding a kernel is still meaningful until its radius
    // reaches past the far edge of the map
    if s > 2 * fm.h.min(fm.w) - 1 {
        return precondition(format!("kernel size {s} exceeds feature map {}x{}", fm.h, fm.w));
    }
    let (d, h, w) = fm.profile();
    let r = (s / 2) as isize;
    let per_kernel = d * s * s;
    let mut weights = vec![0.0f32; h * w * per_kernel];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * per_kernel;
            for c in 0..d {
                for ky in 0..s {
                    let yy = y as isize + ky as isize - r;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..s {
                        let xx = x as isize + kx as isize - r;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        weights[base + (c * s + ky) * s + kx] = fm.get(c, yy as usize, xx as usize);
                    }
                }
            }
        }
    }
    Ok(QueryKernel { hw: h * w, d, s, weights })
}

/// Convolves every query kernel over `fm` with zero padding, so the output
/// keeps `fm`'s spatial size.
pub fn adaptive_convolve(kernel: &QueryKernel, fm: &FeatureMap) -> Result<SimilarityMap> {
    if kernel.d != fm.d {
        return profile_mismatch(format!("kernel has {} channels, feature map {}", kernel.d, fm.d));
    }
    let (d, h, w) = fm.profile();
    let hw = h * w;
    let s = kernel.s;
    if s == 1 {
        return Ok(SimilarityMap { hw_q: kernel.hw, h_g: h, w_g: w, values: pointwise_similarity(kernel, fm) });
    }
    let r = (s / 2) as isize;
    let mut values = Vec::with_capacity(kernel.hw * hw);
    let mut acc = vec![0.0f64; hw];
    for i in 0..kernel.hw {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let k = kernel.kernel(i);
        for c in 0..d {
            let channel = &fm.data[c * hw..(c + 1) * hw];
            for ky in 0..s {
                let dy = ky as isize - r;
                for kx in 0..s {
                    let dx = kx as isize - r;
                    let wgt = f64::from(k[(c * s + ky) * s + kx]);
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize || x_lo >= x_hi {
                            continue;
                        }
                        let src = &channel[yy as usize * w..(yy as usize + 1) * w];
                        let dst = &mut acc[y * w..(y + 1) * w];
                        for x in x_lo..x_hi {
                            dst[x] += wgt * f64::from(src[(x as isize + dx) as usize]);
                        }
                    }
                }
            }
        }
        values.extend(acc.iter().map(|&a| a as f32));
    }
    Ok(SimilarityMap { hw_q: kernel.hw, h_g: h, w_g: w, values })
}

/// `1 × 1` kernels: a plain channel dot product per location pair, computed
/// in register tiles. Every cell sums its channels in increasing order, so
/// the result does not depend on the tiling.
fn pointwise_similarity(kernel: &QueryKernel, fm: &FeatureMap) -> Vec<f32> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX. Only separate multiplies and adds are
        // emitted (no FMA), so results match the portable path bit for bit.
        return unsafe { pointwise_similarity_avx(kernel, fm) };
    }
    pointwise_tiles(kernel, fm)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn pointwise_similarity_avx(kernel: &QueryKernel, fm: &FeatureMap) -> Vec<f32> {
    pointwise_tiles(kernel, fm)
}

#[inline(always)]
fn pointwise_tiles(kernel: &QueryKernel, fm: &FeatureMap) -> Vec<f32> {
    const TI: usize = 4;
    const TJ: usize = 8;
    let hw_q = kernel.hw;
    let hw = fm.h * fm.w;
    let mut out = vec![0.0f32; hw_q * hw];
    let full_i = hw_q / TI * TI;
    let full_j = hw / TJ * TJ;
    for i0 in (0..full_i).step_by(TI) {
        for j0 in (0..full_j).step_by(TJ) {
            tile::<TI, TJ>(kernel, fm, i0, j0, &mut out);
        }
        for j0 in full_j..hw {
            tile::<TI, 1>(kernel, fm, i0, j0, &mut out);
        }
    }
    for i0 in full_i..hw_q {
        for j0 in 0..hw {
            tile::<1, 1>(kernel, fm, i0, j0, &mut out);
        }
    }
    out
}

#[inline(always)]
fn tile<const TI: usize, const TJ: usize>(kernel: &QueryKernel, fm: &FeatureMap, i0: usize, j0: usize, out: &mut [f32]) {
    let d = kernel.d;
    let hw = fm.h * fm.w;
    let q: [&[f32]; TI] = std::array::from_fn(|ii| kernel.kernel(i0 + ii));
    let mut acc = [[0.0f64; TJ]; TI];
    for c in 0..d {
        let g = &fm.data[c * hw + j0..c * hw + j0 + TJ];
        let gv: [f64; TJ] = std::array::from_fn(|jj| f64::from(g[jj]));
        for ii in 0..TI {
            let wgt = f64::from(q[ii][c]);
            for jj in 0..TJ {
                acc[ii][jj] += wgt * gv[jj];
            }
        }
    }
    for ii in 0..TI {
        for jj in 0..TJ {
            out[(i0 + ii) * hw + j0 + jj] = acc[ii][jj] as f32;
        }
    }
}

/// Global max pooling along both axes of a square similarity map. Ties go to
/// the lowest flat index.
pub fn global_max_pool_bidirectional(sm: &SimilarityMap) -> Result<PooledSimilarity> {
    let hw = sm.hw_q;
    let hw_g = sm.h_g * sm.w_g;
    if hw != hw_g {
        return profile_mismatch(format!("pooling needs square matching, got {hw} query vs {hw_g} gallery locations"));
    }
    let mut values = vec![f32::NEG_INFINITY; 2 * hw];
    let mut argmax = vec![0usize; 2 * hw];
    for (i, row) in sm.values.chunks_exact(hw).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > values[i] {
                values[i] = v;
                argmax[i] = j;
            }
            // rows are visited in increasing i, so strict `>` keeps the lowest i
            if v > values[hw + j] {
                values[hw + j] = v;
                argmax[hw + j] = i;
            }
        }
    }
    Ok(PooledSimilarity { values, argmax })
}
