use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FaceSample;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MIN_CROP_SCALE: f64 = 0.8;
pub const MAX_JITTER: f64 = 0.1;
pub const MAX_CHANNEL_SHIFT: f64 = 0.05;

/// Which augmentations to apply. Every enabled transform consumes its random
/// draws in a fixed order: flip, rotation, crop, color. Color distortion is
/// global brightness and contrast plus an independent offset per channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub flip: bool,
    #[serde(default)]
    pub rotation: bool,
    #[serde(default)]
    pub scale_crop: bool,
    #[serde(default)]
    pub color_jitter: bool,
}

impl AugmentPolicy {
    pub fn full() -> Self {
        AugmentPolicy {
            flip: true,
            rotation: true,
            scale_crop: true,
            color_jitter: true,
        }
    }

    /// Flip and color distortion only. Geometric warps resample with a
    /// bilinear kernel, which low-passes fine texture.
    pub fn photometric() -> Self {
        AugmentPolicy {
            flip: true,
            color_jitter: true,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPolicy::default()
    }
}

/// Mirrors a `[C, H, W]` image along the width axis.
pub fn hflip(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[2];
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (x, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - x];
        }
    }
    out
}

/// Bilinear resampling of `out(x) = in(c + R(θ)·scale·(x − c) + offset)`,
/// clamping at the borders.
fn affine(image: &Tensor, theta: f64, scale: f64, offset: (f64, f64)) -> Tensor {
    let s = image.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 - cx) * scale, (y as f64 - cy) * scale);
            let sx = (cos * u - sin * v + cx + offset.0).clamp(0.0, w as f64 - 1.0);
            let sy = (sin * u + cos * v + cy + offset.1).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..ch {
                let p = &src[c * h * w..(c + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[c * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Applies `policy` to a sample. Labels, subject and domain are untouched.
pub fn augment(sample: &FaceSample, rng: &mut impl Rng, policy: &AugmentPolicy) -> FaceSample {
    let mut img = sample.image.clone();
    if policy.flip && rng.gen_bool(0.5) {
        img = hflip(&img);
    }
    let theta = if policy.rotation {
        rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians()
    } else {
        0.0
    };
    let (scale, offset) = if policy.scale_crop {
        let scale = rng.gen_range(MIN_CROP_SCALE..=1.0);
        let half = img.shape()[2] as f64 * (1.0 - scale) / 2.0;
        let off = (rng.gen_range(-half..=half), rng.gen_range(-half..=half));
        (scale, off)
    } else {
        (1.0, (0.0, 0.0))
    };
    if theta != 0.0 || scale != 1.0 {
        img = affine(&img, theta, scale, offset);
    }
    if policy.color_jitter {
        let brightness = rng.gen_range(-MAX_JITTER..=MAX_JITTER) as f32;
        let contrast = rng.gen_range(-MAX_JITTER..=MAX_JITTER) as f32;
        let shift: Vec<f32> = (0..img.shape()[0])
            .map(|_| rng.gen_range(-MAX_CHANNEL_SHIFT..=MAX_CHANNEL_SHIFT) as f32)
            .collect();
        let mean = img.data().iter().sum::<f32>() / img.len() as f32;
        let plane = img.item_len();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (*v - mean) * (1.0 + contrast) + mean * (1.0 + brightness) + shift[i / plane];
        }
    }
    FaceSample {
        image: img.map(|v| v.clamp(0.0, 1.0)),
        pad_label: sample.pad_label,
        subject_id: sample.subject_id,
        domain_id: sample.domain_id.clone(),
    }
}
