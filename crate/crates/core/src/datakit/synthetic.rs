//! Seeded synthetic multi-domain face data.
//!
//! Each image is `background + subject pattern`, and spoof images then go
//! through the domain's artifact pipeline: additive sinusoidal grid,
//! Gaussian blur, global color shift. The subject pattern depends only on
//! `(seed, subject_id)` and the pixel noise only on the sample coordinates,
//! so identity and liveness are independent factors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, FaceSample, PadLabel, SplitTag};
use crate::error::{Error, Result};
use crate::seeding::mix;
use crate::tensor::Tensor;

/// Peak amplitude of the spoof grid.
const GRID_AMPLITUDE: f64 = 0.08;

const SUBJECT_STREAM: u64 = 0x05ab_1ec7;
const NOISE_STREAM: u64 = 0x0153;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub subjects_per_domain: usize,
    pub samples_per_subject_per_class: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_blobs")]
    pub blob_count: usize,
    /// Grid cycles per image, one entry per domain.
    pub spoof_grid_frequency: Vec<f64>,
    pub spoof_blur_sigma: Vec<f64>,
    pub spoof_color_shift: Vec<[f64; 3]>,
    pub domain_background_level: Vec<f64>,
    pub domain_noise_sigma: Vec<f64>,
    pub seed: u64,
}

fn default_resolution() -> usize {
    32
}
fn default_blobs() -> usize {
    3
}

/// Per-domain appearance parameters, as stored column-wise in [`SyntheticSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    pub grid_frequency: f64,
    pub blur_sigma: f64,
    pub color_shift: [f64; 3],
    pub background_level: f64,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    /// Desk-scale preset: every domain blurs its spoofs, but grid frequency,
    /// color shift, background and sensor noise all differ per domain.
    pub fn desk(num_domains: usize, seed: u64) -> Self {
        const GRID: [f64; 4] = [5.0, 8.0, 6.5, 9.5];
        const BLUR: [f64; 4] = [0.9, 1.2, 1.05, 0.8];
        const SHIFT: [[f64; 3]; 4] = [
            [0.015, -0.008, 0.0],
            [-0.008, 0.012, 0.005],
            [0.005, 0.008, -0.015],
            [-0.01, -0.005, 0.012],
        ];
        const BG: [f64; 4] = [0.35, 0.45, 0.40, 0.50];
        const NOISE: [f64; 4] = [0.08, 0.07, 0.09, 0.075];
        let cyc = |i: usize| i % 4;
        SyntheticSpec {
            num_domains,
            subjects_per_domain: 6,
            samples_per_subject_per_class: 6,
            resolution: default_resolution(),
            blob_count: default_blobs(),
            spoof_grid_frequency: (0..num_domains).map(|i| GRID[cyc(i)]).collect(),
            spoof_blur_sigma: (0..num_domains).map(|i| BLUR[cyc(i)]).collect(),
            spoof_color_shift: (0..num_domains).map(|i| SHIFT[cyc(i)]).collect(),
            domain_background_level: (0..num_domains).map(|i| BG[cyc(i)]).collect(),
            domain_noise_sigma: (0..num_domains).map(|i| NOISE[cyc(i)]).collect(),
            seed,
        }
    }

    pub fn domain_id(&self, d: usize) -> String {
        format!("syn{d}")
    }

    pub fn style(&self, d: usize) -> DomainStyle {
        DomainStyle {
            grid_frequency: self.spoof_grid_frequency[d],
            blur_sigma: self.spoof_blur_sigma[d],
            color_shift: self.spoof_color_shift[d],
            background_level: self.domain_background_level[d],
            noise_sigma: self.domain_noise_sigma[d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::config("num_domains", "must be at least 2"));
        }
        if self.subjects_per_domain < 2 {
            return Err(Error::config("subjects_per_domain", "must be at least 2"));
        }
        if self.samples_per_subject_per_class < 1 {
            return Err(Error::config("samples_per_subject_per_class", "must be at least 1"));
        }
        if self.resolution < 4 {
            return Err(Error::config("resolution", "must be at least 4"));
        }
        let n = self.num_domains;
        let lens = [
            ("spoof_grid_frequency", self.spoof_grid_frequency.len()),
            ("spoof_blur_sigma", self.spoof_blur_sigma.len()),
            ("spoof_color_shift", self.spoof_color_shift.len()),
            ("domain_background_level", self.domain_background_level.len()),
            ("domain_noise_sigma", self.domain_noise_sigma.len()),
        ];
        for (field, len) in lens {
            if len != n {
                return Err(Error::config(field, format!("has {len} entries for {n} domains")));
            }
        }
        let bad = |field: &str, d: usize, why: &str| Err(Error::config(format!("{field}[{d}]"), why));
        for d in 0..n {
            let s = self.style(d);
            if !(s.grid_frequency >= 0.0 && s.grid_frequency.is_finite()) {
                return bad("spoof_grid_frequency", d, "must be finite and non-negative");
            }
            if !(s.blur_sigma >= 0.0 && s.blur_sigma.is_finite()) {
                return bad("spoof_blur_sigma", d, "must be finite and non-negative");
            }
            if s.color_shift.iter().any(|c| !(-0.3..=0.3).contains(c)) {
                return bad("spoof_color_shift", d, "components must lie in [-0.3, 0.3]");
            }
            if !(0.0..=1.0).contains(&s.background_level) {
                return bad("domain_background_level", d, "must lie in [0, 1]");
            }
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                return bad("domain_noise_sigma", d, "must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Sum of `blobs` colored Gaussian bumps at subject-specific positions.
fn subject_pattern(seed: u64, subject_id: usize, res: usize, blobs: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, SUBJECT_STREAM, subject_id as u64]));
    let r = res as f64;
    let mut out = vec![0.0; 3 * res * res];
    for _ in 0..blobs {
        let cx = rng.gen_range(0.2..0.8) * r;
        let cy = rng.gen_range(0.2..0.8) * r;
        let s = rng.gen_range(0.08..0.2) * r;
        let color: [f64; 3] = [rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35), rng.gen_range(-0.35..0.35)];
        for y in 0..res {
            for x in 0..res {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                let g = (-d2 / (2.0 * s * s)).exp();
                for c in 0..3 {
                    out[(c * res + y) * res + x] += color[c] * g;
                }
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with clamped borders; `sigma = 0` is the identity.
pub(crate) fn blur(img: &mut [f64], res: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, res as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for c in 0..3 {
        let plane = c * res * res;
        for y in 0..res {
            for x in 0..res {
                tmp[plane + y * res + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * img[plane + y * res + clamp(x as isize + j as isize - radius)])
                    .sum();
            }
        }
        for y in 0..res {
            for x in 0..res {
                img[plane + y * res + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * tmp[plane + clamp(y as isize + j as isize - radius) * res + x])
                    .sum();
            }
        }
    }
}

fn render(spec: &SyntheticSpec, d: usize, pattern: &[f64], subject_id: usize, index: usize, label: PadLabel) -> Tensor {
    let res = spec.resolution;
    let st = spec.style(d);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
        spec.seed,
        NOISE_STREAM,
        d as u64,
        subject_id as u64,
        index as u64,
        label.as_target() as u64,
    ]));
    let noise = Normal::new(0.0, st.noise_sigma.max(0.0)).expect("validated sigma");
    let mut img: Vec<f64> = pattern.iter().map(|p| st.background_level + noise.sample(&mut rng) + p).collect();
    if label == PadLabel::Spoof {
        let w = std::f64::consts::TAU * st.grid_frequency / res as f64;
        for c in 0..3 {
            for y in 0..res {
                for x in 0..res {
                    let g = 0.5 * ((w * x as f64).sin() + (w * y as f64).sin());
                    img[(c * res + y) * res + x] += GRID_AMPLITUDE * g;
                }
            }
        }
        blur(&mut img, res, st.blur_sigma);
        for c in 0..3 {
            for v in &mut img[c * res * res..(c + 1) * res * res] {
                *v += st.color_shift[c];
            }
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(vec![3, res, res], data).expect("render shape")
}

/// Generates `spec.num_domains` datasets. In each, samples are ordered by
/// subject, then sample index, live before spoof.
pub fn generate_synthetic_domains(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    (0..spec.num_domains)
        .map(|d| {
            let domain_id = spec.domain_id(d);
            let jobs: Vec<(usize, usize, PadLabel)> = (0..spec.subjects_per_domain)
                .flat_map(|j| {
                    let sid = d * spec.subjects_per_domain + j;
                    (0..spec.samples_per_subject_per_class).flat_map(move |i| [(sid, i, PadLabel::Live), (sid, i, PadLabel::Spoof)])
                })
                .collect();
            let patterns: Vec<Vec<f64>> = (0..spec.subjects_per_domain)
                .into_par_iter()
                .map(|j| subject_pattern(spec.seed, d * spec.subjects_per_domain + j, spec.resolution, spec.blob_count))
                .collect();
            let samples = jobs
                .par_iter()
                .map(|&(sid, i, label)| FaceSample {
                    image: render(spec, d, &patterns[sid - d * spec.subjects_per_domain], sid, i, label),
                    pad_label: label,
                    subject_id: sid,
                    domain_id: domain_id.clone(),
                })
                .collect();
            DomainDataset::new(domain_id, samples, SplitTag::Train)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            subjects_per_domain: 4,
            samples_per_subject_per_class: 2,
            ..SyntheticSpec::desk(3, seed)
        }
    }

    #[test]
    fn counts_and_balance() {
        let ds = generate_synthetic_domains(&small(7)).unwrap();
        assert_eq!(ds.len(), 3);
        for d in &ds {
            assert_eq!(d.len(), 16);
            assert_eq!(d.count(PadLabel::Live), 8);
            assert_eq!(d.subject_ids.len(), 4);
            assert!(d.samples.iter().all(|s| s.image.shape() == [3, 32, 32]));
            assert!(d.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_domains(&small(7)).unwrap();
        let b = generate_synthetic_domains(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domains(&small(8)).unwrap();
        assert_ne!(a[0].samples[0].image, c[0].samples[0].image);
    }

    #[test]
    fn without_artifacts_live_and_spoof_differ_only_by_noise() {
        let mut spec = small(3);
        spec.spoof_grid_frequency[0] = 0.0;
        spec.spoof_blur_sigma[0] = 0.0;
        spec.spoof_color_shift[0] = [0.0; 3];
        spec.domain_noise_sigma[0] = 0.0;
        let d = &generate_synthetic_domains(&spec).unwrap()[0];
        // With the noise switched off as well, the pair must coincide exactly.
        assert_eq!(d.samples[0].image, d.samples[1].image);

        spec.domain_noise_sigma[0] = 0.02;
        let d = &generate_synthetic_domains(&spec).unwrap()[0];
        let (live, spoof) = (&d.samples[0], &d.samples[1]);
        assert_eq!(live.subject_id, spoof.subject_id);
        let diff: Vec<f32> = live.image.data().iter().zip(spoof.image.data()).map(|(a, b)| a - b).collect();
        // Difference of two independent noise draws: zero mean, std σ·√2.
        let n = diff.len() as f32;
        let mean = diff.iter().sum::<f32>() / n;
        let std = (diff.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n).sqrt();
        assert!(mean.abs() < 0.005, "{mean}");
        assert!((std - 0.02 * 2f32.sqrt()).abs() < 0.005, "{std}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut spec = small(1);
        spec.spoof_color_shift[1] = [0.5, 0.0, 0.0];
        match spec.validate() {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "spoof_color_shift[1]"),
            other => panic!("{other:?}"),
        }
        let mut spec = small(1);
        spec.domain_noise_sigma.pop();
        assert!(matches!(spec.validate(), Err(Error::InvalidConfig { field, .. }) if field == "domain_noise_sigma"));
        let spec = SyntheticSpec {
            num_domains: 1,
            ..small(1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = vec![0.4; 3 * 8 * 8];
        blur(&mut img, 8, 1.3);
        assert!(img.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn spec_json_round_trip_rejects_unknown_keys() {
        let spec = small(5);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticSpec>(&json).unwrap(), spec);
        let bad = json.replacen('{', "{\"extra\":1,", 1);
        assert!(serde_json::from_str::<SyntheticSpec>(&bad).is_err());
    }
}
