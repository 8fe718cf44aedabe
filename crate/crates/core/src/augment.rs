//! Random occlusion and horizontal flipping of image tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{precondition, profile_mismatch, Result};

pub const DEFAULT_MAX_FRAC: f64 = 0.8;
pub const DEFAULT_HEIGHT: usize = 384;
pub const DEFAULT_WIDTH: usize = 128;

/// Channel-major image with values in `[0, 1]`: `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return profile_mismatch(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return precondition(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Placement of an occluding square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occlusion {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl Occlusion {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.side).contains(&y) && (self.left..self.left + self.side).contains(&x)
    }
}

/// Largest admissible square side for an image: `floor(max_frac · W)`,
/// at least one pixel and at most the image height.
pub fn max_side(height: usize, width: usize, max_frac: f64) -> usize {
    ((max_frac * width as f64).floor() as usize).max(1).min(height)
}

/// Paints one white square with side uniform on `[1, max_side]` at a uniform
/// position fully inside the image. A single draw, no rejection.
pub fn random_occlude(img: &ImageTensor, seed: u64, max_frac: f64) -> Result<(ImageTensor, Occlusion)> {
    if img.width == 0 || img.height == 0 {
        return precondition("cannot occlude an empty image");
    }
    if !(max_frac > 0.0 && max_frac <= 1.0) {
        return precondition(format!("max_frac must lie in (0, 1], got {max_frac}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.gen_range(1..=max_side(img.height, img.width, max_frac));
    let top = rng.gen_range(0..=img.height - side);
    let left = rng.gen_range(0..=img.width - side);
    let occ = Occlusion { top, left, side };

    let mut out = img.clone();
    for c in 0..img.channels {
        for y in top..top + side {
            let row = (c * img.height + y) * img.width;
            out.data[row + left..row + left + side].fill(1.0);
        }
    }
    Ok((out, occ))
}

/// Mirrors the image across its vertical axis.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for row in out.data.chunks_exact_mut(img.width.max(1)) {
        row.reverse();
    }
    out
}

/// Flips with probability `p`; returns whether the flip happened.
pub fn random_hflip(img: &ImageTensor, seed: u64, p: f64) -> Result<(ImageTensor, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return precondition(format!("flip probability must lie in [0, 1], got {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(p);
    Ok((if flip { hflip(img) } else { img.clone() }, flip))
}
