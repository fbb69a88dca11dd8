//! Face samples, per-domain datasets and their sources.

mod augment;
mod directory;
mod preprocess;
mod synthetic;

pub use augment::{augment, hflip, AugmentPolicy};
pub use directory::{load_directory_dataset, write_directory_dataset, INDEX_FILE};
pub use preprocess::{decode_png, encode_png, preprocess};
pub use synthetic::{generate_synthetic_domains, DomainStyle, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadLabel {
    Spoof,
    Live,
}

impl PadLabel {
    /// Binary target: live = 1, spoof = 0.
    pub fn as_target(self) -> u8 {
        match self {
            PadLabel::Live => 1,
            PadLabel::Spoof => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PadLabel::Live => "live",
            PadLabel::Spoof => "spoof",
        }
    }
}

impl fmt::Display for PadLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PadLabel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "live" => Ok(PadLabel::Live),
            "spoof" => Ok(PadLabel::Spoof),
            other => Err(format!("unknown pad_label `{other}` (expected live or spoof)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub pad_label: PadLabel,
    pub subject_id: usize,
    pub domain_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub samples: Vec<FaceSample>,
    pub subject_ids: BTreeSet<usize>,
    pub split_tag: SplitTag,
}

impl DomainDataset {
    pub fn new(domain_id: impl Into<String>, samples: Vec<FaceSample>, split_tag: SplitTag) -> Result<Self> {
        let domain_id = domain_id.into();
        if let Some(s) = samples.iter().find(|s| s.domain_id != domain_id) {
            return Err(Error::Dataset {
                domain: domain_id.clone(),
                reason: format!("contains a sample tagged `{}`", s.domain_id),
            });
        }
        if let Some(w) = samples.windows(2).find(|w| w[0].image.shape() != w[1].image.shape()) {
            return Err(Error::shape("dataset image", w[0].image.shape(), w[1].image.shape()));
        }
        let subject_ids = samples.iter().map(|s| s.subject_id).collect();
        Ok(DomainDataset {
            domain_id,
            samples,
            subject_ids,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[2])
    }

    pub fn count(&self, label: PadLabel) -> usize {
        self.samples.iter().filter(|s| s.pad_label == label).count()
    }

    /// Errors unless both liveness classes are present.
    pub fn require_both_classes(&self) -> Result<()> {
        let (live, spoof) = (self.count(PadLabel::Live), self.count(PadLabel::Spoof));
        if live == 0 || spoof == 0 {
            return Err(Error::Dataset {
                domain: self.domain_id.clone(),
                reason: format!("training needs both classes ({live} live, {spoof} spoof)"),
            });
        }
        Ok(())
    }

    /// Dense class index per subject id, in ascending id order.
    pub fn subject_index(&self) -> BTreeMap<usize, usize> {
        self.subject_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect()
    }

    /// `[n, 3, H, W]` batch of the given samples.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self
            .samples
            .first()
            .map(|s| s.image.shape().to_vec())
            .ok_or_else(|| Error::Dataset {
                domain: self.domain_id.clone(),
                reason: "dataset is empty".into(),
            })?;
        let items: Vec<&[f32]> = indices.iter().map(|&i| self.samples[i].image.data()).collect();
        Tensor::stack(&items, &shape)
    }

    /// Like [`DomainDataset::images`], with `policy` applied per sample.
    pub fn augmented_images(&self, indices: &[usize], rng: &mut impl rand::Rng, policy: &AugmentPolicy) -> Result<Tensor> {
        if policy.is_identity() {
            return self.images(indices);
        }
        let aug: Vec<FaceSample> = indices.iter().map(|&i| augment(&self.samples[i], rng, policy)).collect();
        let items: Vec<&[f32]> = aug.iter().map(|s| s.image.data()).collect();
        let shape = aug.first().map(|s| s.image.shape().to_vec()).unwrap_or_default();
        Tensor::stack(&items, &shape)
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.samples[i].pad_label.as_target()).collect()
    }

    /// Stratified split by (subject, label): about `val_fraction` of every
    /// group goes to the validation part, chosen by a seeded shuffle.
    /// Sample order is preserved within each part.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        let mut groups: BTreeMap<(usize, PadLabel), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups.entry((s.subject_id, s.pad_label)).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_val = vec![false; self.len()];
        for idx in groups.values_mut() {
            idx.shuffle(&mut rng);
            let k = (idx.len() as f64 * val_fraction).round() as usize;
            let k = k.min(idx.len().saturating_sub(1));
            for &i in &idx[..k] {
                is_val[i] = true;
            }
        }
        let pick = |want: bool, tag| {
            let samples = self
                .samples
                .iter()
                .zip(&is_val)
                .filter(|(_, &v)| v == want)
                .map(|(s, _)| s.clone())
                .collect();
            DomainDataset::new(self.domain_id.clone(), samples, tag)
        };
        Ok((pick(false, SplitTag::Train)?, pick(true, SplitTag::Val)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(domain: &str, label: PadLabel, subject: usize) -> FaceSample {
        FaceSample {
            image: Tensor::zeros(&[3, 4, 4]),
            pad_label: label,
            subject_id: subject,
            domain_id: domain.into(),
        }
    }

    #[test]
    fn foreign_domain_sample_is_rejected() {
        let r = DomainDataset::new(
            "a",
            vec![sample("a", PadLabel::Live, 0), sample("b", PadLabel::Live, 0)],
            SplitTag::Train,
        );
        assert!(r.is_err());
    }

    #[test]
    fn single_class_dataset_fails_training_check() {
        let d = DomainDataset::new("a", vec![sample("a", PadLabel::Live, 0)], SplitTag::Train).unwrap();
        assert!(d.require_both_classes().is_err());
    }

    #[test]
    fn split_is_stratified_and_order_preserving() {
        let mut v = Vec::new();
        for s in 0..3 {
            for _ in 0..5 {
                v.push(sample("a", PadLabel::Live, s));
                v.push(sample("a", PadLabel::Spoof, s));
            }
        }
        let d = DomainDataset::new("a", v, SplitTag::Train).unwrap();
        let (tr, va) = d.split(0.2, 1).unwrap();
        assert_eq!(tr.len() + va.len(), 30);
        assert_eq!(va.len(), 6);
        assert_eq!(va.count(PadLabel::Live), 3);
        assert_eq!(tr.subject_ids, va.subject_ids);
        assert_eq!(va.split_tag, SplitTag::Val);
    }

    #[test]
    fn pad_label_parsing() {
        assert_eq!("live".parse::<PadLabel>().unwrap(), PadLabel::Live);
        assert!("genuine".parse::<PadLabel>().is_err());
    }
}
