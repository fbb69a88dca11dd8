//! Stage 2: cross-verified multi-domain feature learning.
//!
//! For source domain `i` the training feature is
//! `U_i = E_PAD^{(i+1) mod N}(x_i) ⊕ E_ID^i(x_i)`: the PAD part comes from
//! another domain's encoder, the ID part from the domain's own frozen ID
//! encoder. `U_i` feeds a liveness classifier `F_i` (binary cross-entropy)
//! and a decoder `D_REC^i` (L1 reconstruction of `x_i`). For two domains
//! this is exactly the A/B cross pairing; the cyclic assignment for more
//! domains is this crate's extension.
//!
//! Only the PAD encoders (encoder learning rate) and `F_i`, `D_REC^i` (head
//! learning rate) are updated. The ID encoders are never touched.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{AugmentPolicy, DomainDataset, FaceSample};
use crate::drnet::{chunked, EncoderPair};
use crate::error::{Error, Result};
use crate::history::{DataAudit, EpochRecord, LossAccumulator};
use crate::linear::{fit_logistic, FitOptions};
use crate::nets::{DecoderNet, EncoderNet, LinearClassifier, Network};
use crate::objectives::{binary_ce, l1_reconstruction};
use crate::optim::{Adam, AdamConfig};
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRole {
    Pad,
    Id,
}

/// One encoder's trunk feature for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledFeature {
    pub vector: Vec<f32>,
    pub domain_id: String,
    pub role: FeatureRole,
    pub sample_ref: usize,
}

/// `PAD part ⊕ ID part`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainFeature {
    pub vector: Vec<f32>,
}

impl MultiDomainFeature {
    pub fn feature_dim(&self) -> usize {
        self.vector.len() / 2
    }

    pub fn pad_part(&self) -> &[f32] {
        &self.vector[..self.feature_dim()]
    }

    pub fn id_part(&self) -> &[f32] {
        &self.vector[self.feature_dim()..]
    }
}

/// Inference-mode trunk feature of `sample` from an encoder learned in
/// `domain_id` with the given role.
pub fn extract_feature(
    encoder: &EncoderNet,
    domain_id: &str,
    role: FeatureRole,
    sample: &FaceSample,
    sample_ref: usize,
) -> Result<DisentangledFeature> {
    let s = sample.image.shape();
    let x = Tensor::new(vec![1, s[0], s[1], s[2]], sample.image.data().to_vec())?;
    Ok(DisentangledFeature {
        vector: encoder.features(&x)?.into_data(),
        domain_id: domain_id.into(),
        role,
        sample_ref,
    })
}

pub fn cross_concat(pad: &DisentangledFeature, id: &DisentangledFeature) -> Result<MultiDomainFeature> {
    if pad.vector.len() != id.vector.len() {
        return Err(Error::shape("cross_concat", &[pad.vector.len()], &[id.vector.len()]));
    }
    if pad.role != FeatureRole::Pad || id.role != FeatureRole::Id {
        return Err(Error::config("cross_concat", "expects a PAD feature followed by an ID feature"));
    }
    let mut vector = pad.vector.clone();
    vector.extend_from_slice(&id.vector);
    Ok(MultiDomainFeature { vector })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossFlags {
    #[serde(default = "yes")]
    pub use_ce: bool,
    #[serde(default = "yes")]
    pub use_rec: bool,
}

fn yes() -> bool {
    true
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            use_ce: true,
            use_rec: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MDConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_encoder_lr")]
    pub encoder_lr: f32,
    #[serde(default = "default_head_lr")]
    pub head_lr: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub loss_flags: LossFlags,
    #[serde(default)]
    pub seed: u64,
    /// Final classifier fit on concatenated PAD features.
    #[serde(default)]
    pub final_fit: FitOptions,
    #[serde(default = "AugmentPolicy::photometric")]
    pub augment: AugmentPolicy,
}

fn default_epochs() -> usize {
    100
}
fn default_encoder_lr() -> f32 {
    5e-4
}
fn default_head_lr() -> f32 {
    2e-3
}
fn default_batch() -> usize {
    32
}

impl Default for MDConfig {
    fn default() -> Self {
        MDConfig {
            epochs: default_epochs(),
            encoder_lr: default_encoder_lr(),
            head_lr: default_head_lr(),
            batch_size: default_batch(),
            loss_flags: LossFlags::default(),
            seed: 0,
            final_fit: FitOptions::default(),
            augment: AugmentPolicy::photometric(),
        }
    }
}

impl MDConfig {
    /// Full-size schedule: batch 128, learning rates 1e-5 (encoders) and
    /// 1e-4 (heads).
    pub fn full_scale() -> Self {
        MDConfig {
            batch_size: 128,
            encoder_lr: 1e-5,
            head_lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("md.encoder_lr", self.encoder_lr), ("md.head_lr", self.head_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("md.batch_size", "must be positive"));
        }
        if !self.loss_flags.use_ce && !self.loss_flags.use_rec {
            return Err(Error::config("md.loss_flags", "at least one of use_ce, use_rec must be true"));
        }
        self.final_fit.validate("md.final_fit")
    }
}

/// Learned stage-2 state, indexed by source domain.
pub struct MdRun {
    pub domain_ids: Vec<String>,
    pub pad_encoders: Vec<EncoderNet>,
    pub id_encoders: Vec<EncoderNet>,
    pub classifiers: Vec<LinearClassifier>,
    pub decoders: Vec<DecoderNet>,
    pub history: Vec<EpochRecord>,
    /// Full-data stage-2 loss before the first and after the last update.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl MdRun {
    /// Index of the PAD encoder that domain `i` is cross-verified with.
    pub fn partner(&self, i: usize) -> usize {
        (i + 1) % self.pad_encoders.len()
    }
}

struct Heads {
    classifiers: Vec<LinearClassifier>,
    decoders: Vec<DecoderNet>,
}

/// Stage-2 loss terms of domain `i` for one batch; with `train`, also
/// backpropagates into the PAD encoder, classifier and decoder.
#[allow(clippy::too_many_arguments)]
fn domain_terms(
    x: &Tensor,
    y: &[u8],
    pad: &mut EncoderNet,
    id: &EncoderNet,
    clf: &mut LinearClassifier,
    dec: &mut DecoderNet,
    flags: LossFlags,
    train: bool,
) -> Result<(f64, f64)> {
    let df = id.feature_dim();
    let p = if train { pad.features_train(x)? } else { pad.features(x)? };
    let u = Tensor::cat_cols(&p, &id.features(x)?)?;
    let mut gu = Tensor::zeros(u.shape());
    let (mut ce, mut rec) = (0.0, 0.0);
    if flags.use_ce {
        let z = if train { clf.forward_train(&u)? } else { clf.forward(&u)? };
        let l = binary_ce(&z.to_f64(), y)?;
        ce = l.loss.value;
        if train {
            gu.add_assign(&clf.backward(&Tensor::from_f64(z.shape(), &l.grads[0])?));
        }
    }
    if flags.use_rec {
        let r = if train { dec.forward_train(&u)? } else { dec.forward(&u)? };
        let l = l1_reconstruction(&x.to_f64(), &r.to_f64(), x.batch())?;
        rec = l.loss.value;
        if train {
            gu.add_assign(&dec.backward(&Tensor::from_f64(r.shape(), &l.grads[0])?));
        }
    }
    if train {
        pad.backward_features(&gu.slice_cols(0, df));
    }
    Ok((ce, rec))
}

fn check_pairs(pairs: &[EncoderPair], datasets: &[DomainDataset]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::config("pairs", "stage 2 needs at least two source domains"));
    }
    if pairs.len() != datasets.len() {
        return Err(Error::config(
            "datasets",
            format!("{} encoder pairs but {} datasets", pairs.len(), datasets.len()),
        ));
    }
    let c0 = pairs[0].e_pad.config();
    for (p, d) in pairs.iter().zip(datasets) {
        for e in [&p.e_pad, &p.e_id] {
            let c = e.config();
            if c.feature_dim != c0.feature_dim || c.resolution != c0.resolution {
                return Err(Error::shape(
                    format!("encoder of `{}`", p.domain_id),
                    &[c0.resolution, c0.feature_dim],
                    &[c.resolution, c.feature_dim],
                ));
            }
        }
        if p.domain_id != d.domain_id {
            return Err(Error::config(
                "datasets",
                format!("pair `{}` given dataset `{}`", p.domain_id, d.domain_id),
            ));
        }
        if d.is_empty() {
            return Err(Error::Dataset {
                domain: d.domain_id.clone(),
                reason: "no training samples".into(),
            });
        }
    }
    Ok(())
}

fn full_loss(pads: &mut [EncoderNet], ids: &[EncoderNet], heads: &mut Heads, datasets: &[DomainDataset], flags: LossFlags) -> Result<f64> {
    let n = pads.len();
    let mut total = 0.0;
    for (i, d) in datasets.iter().enumerate() {
        let all: Vec<usize> = (0..d.len()).collect();
        let (x, y) = (d.images(&all)?, d.targets(&all));
        let (ce, rec) = domain_terms(
            &x,
            &y,
            &mut pads[(i + 1) % n],
            &ids[i],
            &mut heads.classifiers[i],
            &mut heads.decoders[i],
            flags,
            false,
        )?;
        total += ce + rec;
    }
    Ok(total)
}

/// Stage 2 over `N ≥ 2` source domains with cyclic PAD-encoder assignment.
pub fn generalize_to_n_domains(
    pairs: Vec<EncoderPair>,
    datasets: &[DomainDataset],
    cfg: &MDConfig,
    audit: &dyn DataAudit,
) -> Result<MdRun> {
    cfg.validate()?;
    check_pairs(&pairs, datasets)?;
    let n = pairs.len();
    let flags = cfg.loss_flags;
    let net = pairs[0].e_pad.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, "md"));
    let mut domain_ids = Vec::with_capacity(n);
    let mut pads = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for p in pairs {
        domain_ids.push(p.domain_id);
        pads.push(p.e_pad);
        ids.push(p.e_id);
    }
    let mut heads = Heads {
        classifiers: (0..n)
            .map(|_| LinearClassifier::new(2 * net.feature_dim, net.init_std, &mut rng))
            .collect(),
        decoders: (0..n).map(|_| DecoderNet::new(&net, &mut rng)).collect::<Result<_>>()?,
    };
    let mut opt_enc = Adam::new(AdamConfig::with_lr(cfg.encoder_lr));
    let mut opt_head = Adam::new(AdamConfig::with_lr(cfg.head_lr));
    let initial_loss = full_loss(&mut pads, &ids, &mut heads, datasets, flags)?;
    let steps = datasets.iter().map(|d| d.len()).max().unwrap_or(0).div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = LossAccumulator::default();
        for _ in 0..steps {
            let mut ce_sum = 0.0;
            let mut rec_sum = 0.0;
            for (i, d) in datasets.iter().enumerate() {
                let idx = index::sample(&mut rng, d.len(), cfg.batch_size.min(d.len())).into_vec();
                let domains: Vec<&str> = idx.iter().map(|&k| d.samples[k].domain_id.as_str()).collect();
                audit.on_batch(&d.domain_id, "md", &domains);
                let (x, y) = (d.augmented_images(&idx, &mut rng, &cfg.augment)?, d.targets(&idx));
                let (ce, rec) = domain_terms(
                    &x,
                    &y,
                    &mut pads[(i + 1) % n],
                    &ids[i],
                    &mut heads.classifiers[i],
                    &mut heads.decoders[i],
                    flags,
                    true,
                )?;
                ce_sum += ce;
                rec_sum += rec;
            }
            let names: Vec<String> = (0..n).map(|i| format!("pad{i}")).collect();
            let mut enc: Vec<(&str, &mut dyn Network)> = names
                .iter()
                .zip(pads.iter_mut())
                .map(|(s, e)| (s.as_str(), e as &mut dyn Network))
                .collect();
            opt_enc.step(&mut enc);
            step_heads(&mut opt_head, &mut heads, flags);
            acc.add(&[("ce", ce_sum), ("rec", rec_sum), ("total", ce_sum + rec_sum)], epoch)?;
        }
        history.push(acc.finish("md", &domain_ids.join("+"), "cross", epoch));
    }
    let final_loss = full_loss(&mut pads, &ids, &mut heads, datasets, flags)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite {
            name: "md full-data loss".into(),
            epoch: cfg.epochs,
            step: 0,
        });
    }
    Ok(MdRun {
        domain_ids,
        pad_encoders: pads,
        id_encoders: ids,
        classifiers: heads.classifiers,
        decoders: heads.decoders,
        history,
        initial_loss,
        final_loss,
    })
}

fn step_heads(opt: &mut Adam, heads: &mut Heads, flags: LossFlags) {
    let mut groups: Vec<(String, &mut dyn Network)> = Vec::new();
    if flags.use_ce {
        for (i, c) in heads.classifiers.iter_mut().enumerate() {
            groups.push((format!("f{i}"), c));
        }
    }
    if flags.use_rec {
        for (i, d) in heads.decoders.iter_mut().enumerate() {
            groups.push((format!("rec{i}"), d));
        }
    }
    let mut refs: Vec<(&str, &mut dyn Network)> = groups.iter_mut().map(|(s, n)| (s.as_str(), &mut **n)).collect();
    opt.step(&mut refs);
}

/// The two-domain case: `U_A = E_PAD^B(x_A) ⊕ E_ID^A(x_A)` and
/// `U_B = E_PAD^A(x_B) ⊕ E_ID^B(x_B)`.
pub fn train_mdnet(
    pair_a: EncoderPair,
    pair_b: EncoderPair,
    data_a: &DomainDataset,
    data_b: &DomainDataset,
    cfg: &MDConfig,
    audit: &dyn DataAudit,
) -> Result<MdRun> {
    generalize_to_n_domains(vec![pair_a, pair_b], &[data_a.clone(), data_b.clone()], cfg, audit)
}

/// `[n, N·D_f]` concatenation of every PAD encoder's features, encoders in
/// domain-index order.
pub fn pad_features(encoders: &[&EncoderNet], dataset: &DomainDataset) -> Result<Tensor> {
    if encoders.is_empty() {
        return Err(Error::config("encoders", "need at least one PAD encoder"));
    }
    let df = encoders[0].feature_dim();
    if let Some(e) = encoders.iter().find(|e| e.feature_dim() != df) {
        return Err(Error::shape("PAD encoder feature width", &[df], &[e.feature_dim()]));
    }
    let width = df * encoders.len();
    let rows = chunked(dataset, |x| {
        let parts: Vec<Tensor> = encoders.iter().map(|e| e.features(x)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        let cat = Tensor::cat_cols_many(&refs)?;
        Ok(cat.data().chunks(width).map(|r| r.to_vec()).collect::<Vec<_>>())
    })?;
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    Tensor::new(vec![dataset.len(), width], data)
}

/// Fits `F_MD` on the concatenated PAD features of every training image of
/// every source domain. The encoders are only read.
pub fn train_final_classifier(pad_encoders: &[&EncoderNet], datasets: &[DomainDataset], opts: &FitOptions) -> Result<LinearClassifier> {
    let mut feats: Option<Tensor> = None;
    let mut labels = Vec::new();
    for d in datasets {
        let f = pad_features(pad_encoders, d)?;
        labels.extend(d.targets(&(0..d.len()).collect::<Vec<_>>()));
        feats = Some(match feats {
            None => f,
            Some(acc) => Tensor::cat_batch(&acc, &f)?,
        });
    }
    let x = feats.ok_or_else(|| Error::config("datasets", "need at least one dataset"))?;
    fit_logistic(&x, &labels, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(v: &[f32], role: FeatureRole) -> DisentangledFeature {
        DisentangledFeature {
            vector: v.to_vec(),
            domain_id: "a".into(),
            role,
            sample_ref: 0,
        }
    }

    #[test]
    fn cross_concat_puts_pad_first() {
        let u = cross_concat(&feat(&[1.0, 2.0], FeatureRole::Pad), &feat(&[3.0, 4.0], FeatureRole::Id)).unwrap();
        assert_eq!(u.vector, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(u.pad_part(), [1.0, 2.0]);
        assert_eq!(u.id_part(), [3.0, 4.0]);
    }

    #[test]
    fn cross_concat_of_units_has_norm_two() {
        let u = cross_concat(&feat(&[0.0, 1.0, 0.0], FeatureRole::Pad), &feat(&[1.0, 0.0, 0.0], FeatureRole::Id)).unwrap();
        assert_eq!(u.vector.iter().map(|v| v * v).sum::<f32>(), 2.0);
        let z = cross_concat(&feat(&[0.0; 4], FeatureRole::Pad), &feat(&[0.0; 4], FeatureRole::Id)).unwrap();
        assert_eq!(z.vector, vec![0.0; 8]);
    }

    #[test]
    fn cross_concat_rejects_mismatch() {
        assert!(cross_concat(&feat(&[1.0], FeatureRole::Pad), &feat(&[1.0, 2.0], FeatureRole::Id)).is_err());
        assert!(cross_concat(&feat(&[1.0], FeatureRole::Id), &feat(&[1.0], FeatureRole::Pad)).is_err());
    }

    #[test]
    fn both_losses_off_is_invalid() {
        let cfg = MDConfig {
            loss_flags: LossFlags {
                use_ce: false,
                use_rec: false,
            },
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })));
    }
}
