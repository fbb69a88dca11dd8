//! Stage 1: per-domain adversarial training of a liveness GAN and an
//! identity GAN whose discriminators become the PAD and ID encoders.
//!
//! Each discriminator step minimizes the real/generated loss plus λ times
//! the class loss on the union of real images (true labels) and generated
//! images (their sampled class codes). Each generator step minimizes the
//! non-saturating generator loss plus λ times the class loss on its own
//! images. Adam uses β = (0.5, 0.999).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{AugmentPolicy, DomainDataset, PadLabel};
use crate::error::{Error, Result};
use crate::history::{DataAudit, EpochRecord, LossAccumulator};
use crate::nets::{one_hot, EncoderNet, GeneratorNet, NetConfig, Network};
use crate::objectives::{aux_class_loss, dr_objective, gan_loss_discriminator, gan_loss_generator, DRWeights};
use crate::optim::{Adam, AdamConfig};
use crate::seeding;
use crate::tensor::Tensor;

/// Rows per inference chunk.
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DRConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_d_steps")]
    pub d_steps_per_g_step: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "AugmentPolicy::photometric")]
    pub augment: AugmentPolicy,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f32 {
    2e-3
}
fn default_lambda() -> f64 {
    1.0
}
fn default_d_steps() -> usize {
    1
}

impl Default for DRConfig {
    fn default() -> Self {
        DRConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            lambda: default_lambda(),
            d_steps_per_g_step: default_d_steps(),
            seed: 0,
            augment: AugmentPolicy::photometric(),
        }
    }
}

impl DRConfig {
    /// Full-size schedule: 300 epochs at batch 128.
    pub fn full_scale() -> Self {
        DRConfig {
            epochs: 300,
            batch_size: 128,
            ..Self::default()
        }
    }

    /// `epochs = 0` is allowed and returns freshly initialized networks.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("dr.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("dr.lr", "must be positive and finite"));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::config("dr.d_steps_per_g_step", "must be positive"));
        }
        DRWeights { lambda: self.lambda }
            .validate()
            .map_err(|_| Error::config("dr.lambda", "must be positive and finite"))
    }

    fn weights(&self) -> DRWeights {
        DRWeights { lambda: self.lambda }
    }
}

/// The two encoders learned in one source domain.
pub struct EncoderPair {
    pub e_pad: EncoderNet,
    pub e_id: EncoderNet,
    pub domain_id: String,
}

/// A trained generator/discriminator pair.
pub struct GanRun {
    pub generator: GeneratorNet,
    pub discriminator: EncoderNet,
    pub history: Vec<EpochRecord>,
}

/// Everything stage 1 produces for one domain.
pub struct DomainDr {
    pub pair: EncoderPair,
    pub pad_generator: Option<GeneratorNet>,
    pub id_generator: Option<GeneratorNet>,
    pub history: Vec<EpochRecord>,
}

/// What a trainer is asked to classify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Liveness,
    Subject,
}

impl Target {
    pub fn role(self) -> &'static str {
        match self {
            Target::Liveness => "pad",
            Target::Subject => "id",
        }
    }

    /// Dense labels and class count for `dataset`.
    pub fn labels(self, dataset: &DomainDataset) -> Result<(Vec<usize>, usize)> {
        match self {
            Target::Liveness => {
                dataset.require_both_classes()?;
                let y = dataset.samples.iter().map(|s| s.pad_label.as_target() as usize).collect();
                Ok((y, 2))
            }
            Target::Subject => {
                let k = dataset.subject_ids.len();
                if k < 2 {
                    return Err(Error::Dataset {
                        domain: dataset.domain_id.clone(),
                        reason: format!("identity training needs at least 2 subjects, found {k}"),
                    });
                }
                let index = dataset.subject_index();
                Ok((dataset.samples.iter().map(|s| index[&s.subject_id]).collect(), k))
            }
        }
    }
}

struct Job<'a> {
    dataset: &'a DomainDataset,
    labels: Vec<usize>,
    classes: usize,
    role: &'static str,
}

impl<'a> Job<'a> {
    fn new(dataset: &'a DomainDataset, target: Target) -> Result<Self> {
        let (labels, classes) = target.labels(dataset)?;
        Ok(Job {
            dataset,
            labels,
            classes,
            role: target.role(),
        })
    }

    fn rng(&self, seed: u64, stage: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seeding::derive(seed, &format!("{stage}/{}/{}", self.dataset.domain_id, self.role)))
    }

    fn batch(&self, idx: &[usize], rng: &mut impl Rng, policy: &AugmentPolicy, audit: &dyn DataAudit) -> Result<(Tensor, Vec<usize>)> {
        let domains: Vec<&str> = idx.iter().map(|&i| self.dataset.samples[i].domain_id.as_str()).collect();
        audit.on_batch(&self.dataset.domain_id, self.role, &domains);
        let x = self.dataset.augmented_images(idx, rng, policy)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn sample_codes(rng: &mut impl Rng, b: usize, noise_dim: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let z: Vec<f32> = (0..b * noise_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let c = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    (Tensor::new(vec![b, noise_dim], z).expect("noise shape"), c)
}

fn grad_tensor(shape: &[usize], parts: &[&[f64]], scale: f64) -> Tensor {
    let data: Vec<f32> = parts.iter().flat_map(|p| p.iter()).map(|&g| (g * scale) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

fn train_gan(job: &Job, net: &NetConfig, cfg: &DRConfig, audit: &dyn DataAudit) -> Result<GanRun> {
    cfg.validate()?;
    if job.dataset.is_empty() {
        return Err(Error::Dataset {
            domain: job.dataset.domain_id.clone(),
            reason: "no training samples".into(),
        });
    }
    let ncfg = net.with_classes(job.classes);
    let k = job.classes;
    let w = cfg.weights();
    let mut rng = job.rng(cfg.seed, "gan");
    let mut g = GeneratorNet::new(&ncfg, &mut rng)?;
    let mut d = EncoderNet::new(&ncfg, &mut rng)?;
    let mut opt_g = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut opt_d = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..job.dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::default();
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = job.batch(idx, &mut rng, &cfg.augment, audit)?;
            let b = idx.len();
            let mut d_vals = (0.0, 0.0, 0.0);
            for _ in 0..cfg.d_steps_per_g_step {
                let (z, c) = sample_codes(&mut rng, b, ncfg.noise_dim, k);
                let fake = g.forward_train(&z, &one_hot(&c, k))?;
                let out = d.forward_train(&Tensor::cat_batch(&x, &fake)?)?;
                let adv = out.adv.to_f64();
                let cls = out.cls.to_f64();
                let gan = gan_loss_discriminator(&adv[..b], &adv[b..])?;
                let aux = aux_class_loss(&cls[..b * k], &y, &cls[b * k..], &c, k)?;
                let total = dr_objective(gan.loss.value, aux.loss.value, w);
                d.backward(
                    &grad_tensor(out.adv.shape(), &[&gan.grads[0], &gan.grads[1]], 1.0),
                    &grad_tensor(out.cls.shape(), &[&aux.grads[0], &aux.grads[1]], w.lambda),
                );
                opt_d.step(&mut [("d", &mut d)]);
                d_vals = (total.value, gan.loss.value, aux.loss.value);
            }
            let (z, c) = sample_codes(&mut rng, b, ncfg.noise_dim, k);
            let fake = g.forward_train(&z, &one_hot(&c, k))?;
            let out = d.forward_train(&fake)?;
            let gan = gan_loss_generator(&out.adv.to_f64())?;
            let aux = aux_class_loss(&[], &[], &out.cls.to_f64(), &c, k)?;
            let total = dr_objective(gan.loss.value, aux.loss.value, w);
            let dimg = d.backward(
                &grad_tensor(out.adv.shape(), &[&gan.grads[0]], 1.0),
                &grad_tensor(out.cls.shape(), &[&aux.grads[1]], w.lambda),
            );
            d.zero_grad();
            g.backward(&dimg);
            opt_g.step(&mut [("g", &mut g)]);
            acc.add(
                &[
                    ("d_total", d_vals.0),
                    ("d_gan", d_vals.1),
                    ("d_cls", d_vals.2),
                    ("g_total", total.value),
                    ("g_gan", gan.loss.value),
                    ("g_cls", aux.loss.value),
                ],
                epoch,
            )?;
        }
        check_params(&d, "discriminator", epoch)?;
        check_params(&g, "generator", epoch)?;
        history.push(acc.finish("dr", &job.dataset.domain_id, job.role, epoch));
    }
    Ok(GanRun {
        generator: g,
        discriminator: d,
        history,
    })
}

fn check_params(net: &dyn Network, name: &str, epoch: usize) -> Result<()> {
    if net.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            name: format!("{name} parameters"),
            epoch,
            step: 0,
        })
    }
}

/// Liveness GAN on one domain (K = 2, labels live = 1 / spoof = 0).
pub fn train_pad_gan(dataset: &DomainDataset, net: &NetConfig, cfg: &DRConfig, audit: &dyn DataAudit) -> Result<GanRun> {
    train_gan(&Job::new(dataset, Target::Liveness)?, net, cfg, audit)
}

/// Identity GAN on one domain (K = number of subjects, dense by id order).
pub fn train_id_gan(dataset: &DomainDataset, net: &NetConfig, cfg: &DRConfig, audit: &dyn DataAudit) -> Result<GanRun> {
    train_gan(&Job::new(dataset, Target::Subject)?, net, cfg, audit)
}

/// Trains an encoder as a plain classifier on real images only, with the
/// class loss alone. Used as the no-disentanglement baseline.
pub fn train_plain_encoder(
    dataset: &DomainDataset,
    target: Target,
    net: &NetConfig,
    cfg: &DRConfig,
    audit: &dyn DataAudit,
) -> Result<(EncoderNet, Vec<EpochRecord>)> {
    cfg.validate()?;
    let job = Job::new(dataset, target)?;
    let k = job.classes;
    let mut rng = job.rng(cfg.seed, "plain");
    let mut e = EncoderNet::new(&net.with_classes(k), &mut rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossAccumulator::default();
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = job.batch(idx, &mut rng, &cfg.augment, audit)?;
            let out = e.forward_train(&x)?;
            let aux = aux_class_loss(&out.cls.to_f64(), &y, &[], &[], k)?;
            e.backward(
                &Tensor::zeros(out.adv.shape()),
                &grad_tensor(out.cls.shape(), &[&aux.grads[0]], 1.0),
            );
            opt.step(&mut [("e", &mut e)]);
            acc.add(&[("cls", aux.loss.value)], epoch)?;
        }
        check_params(&e, "encoder", epoch)?;
        history.push(acc.finish("plain", &dataset.domain_id, job.role, epoch));
    }
    Ok((e, history))
}

/// Stage 1 for every domain. The PAD and ID trainers of all domains are
/// independent and run concurrently; the output order matches the input.
pub fn train_dr_all(domains: &[DomainDataset], net: &NetConfig, cfg: &DRConfig, audit: &dyn DataAudit) -> Result<Vec<DomainDr>> {
    run_all(domains, |d, t| {
        let run = match t {
            Target::Liveness => train_pad_gan(d, net, cfg, audit)?,
            Target::Subject => train_id_gan(d, net, cfg, audit)?,
        };
        Ok((run.discriminator, Some(run.generator), run.history))
    })
}

/// Baseline stage 1: plain liveness and subject classifiers per domain.
pub fn train_plain_all(domains: &[DomainDataset], net: &NetConfig, cfg: &DRConfig, audit: &dyn DataAudit) -> Result<Vec<DomainDr>> {
    run_all(domains, |d, t| {
        let (e, h) = train_plain_encoder(d, t, net, cfg, audit)?;
        Ok((e, None, h))
    })
}

type Trained = (EncoderNet, Option<GeneratorNet>, Vec<EpochRecord>);

fn run_all(domains: &[DomainDataset], train: impl Fn(&DomainDataset, Target) -> Result<Trained> + Sync) -> Result<Vec<DomainDr>> {
    if domains.is_empty() {
        return Err(Error::config("domains", "need at least one domain"));
    }
    let jobs: Vec<(usize, Target)> = (0..domains.len())
        .flat_map(|i| [(i, Target::Liveness), (i, Target::Subject)])
        .collect();
    let mut done: Vec<Result<Trained>> = jobs
        .par_iter()
        .map(|&(i, t)| train(&domains[i], t).map_err(|e| e.in_domain(&domains[i].domain_id)))
        .collect();
    let mut out = Vec::with_capacity(domains.len());
    for d in domains.iter().rev() {
        let (e_id, id_generator, id_hist) = done.pop().expect("id job")?;
        let (e_pad, pad_generator, mut history) = done.pop().expect("pad job")?;
        history.extend(id_hist);
        out.push(DomainDr {
            pair: EncoderPair {
                e_pad,
                e_id,
                domain_id: d.domain_id.clone(),
            },
            pad_generator,
            id_generator,
            history,
        });
    }
    out.reverse();
    Ok(out)
}

/// Row-wise softmax probability of class `class`.
fn class_probability(logits: &[f32], k: usize, class: usize) -> Vec<f64> {
    logits
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            (row[class] as f64 - m).exp() / z
        })
        .collect()
}

/// Runs `f` over the dataset in fixed-size chunks and concatenates results.
pub(crate) fn chunked<T>(dataset: &DomainDataset, mut f: impl FnMut(&Tensor) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for c in idx.chunks(INFER_CHUNK) {
        out.extend(f(&dataset.images(c)?)?);
    }
    Ok(out)
}

/// Live probability from a liveness discriminator's class head.
pub fn live_probability(d: &EncoderNet, dataset: &DomainDataset) -> Result<Vec<f64>> {
    if d.num_classes() != 2 {
        return Err(Error::config("encoder", "liveness scoring needs a two-class head"));
    }
    chunked(dataset, |x| {
        Ok(class_probability(d.forward(x)?.cls.data(), 2, PadLabel::Live.as_target() as usize))
    })
}

/// Class-head accuracy of `e` against `target` labels.
pub fn head_accuracy(e: &EncoderNet, dataset: &DomainDataset, target: Target) -> Result<f64> {
    let (labels, k) = target.labels(dataset)?;
    if k != e.num_classes() {
        return Err(Error::config(
            "encoder",
            format!("head has {} classes, labels have {k}", e.num_classes()),
        ));
    }
    let pred = chunked(dataset, |x| {
        let cls = e.forward(x)?.cls;
        Ok(cls
            .data()
            .chunks(k)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                    .0
            })
            .collect())
    })?;
    Ok(pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{generate_synthetic_domains, SyntheticSpec};
    use crate::history::NoAudit;

    fn tiny_net() -> NetConfig {
        NetConfig {
            resolution: 16,
            noise_dim: 8,
            feature_dim: 16,
            residual_blocks: 2,
            upsample_stages: 2,
            base_channels: 4,
            ..NetConfig::desk()
        }
    }

    fn tiny_domain() -> DomainDataset {
        let mut spec = SyntheticSpec::desk(2, 3);
        spec.resolution = 16;
        spec.subjects_per_domain = 3;
        spec.samples_per_subject_per_class = 2;
        generate_synthetic_domains(&spec).unwrap().remove(0)
    }

    #[test]
    fn zero_epochs_returns_initial_networks() {
        let cfg = DRConfig {
            epochs: 0,
            ..Default::default()
        };
        let run = train_pad_gan(&tiny_domain(), &tiny_net(), &cfg, &NoAudit).unwrap();
        assert!(run.history.is_empty());
        let domain = tiny_domain();
        let fresh = {
            let job = Job::new(&domain, Target::Liveness).unwrap();
            let mut rng = job.rng(0, "gan");
            let _ = GeneratorNet::new(&tiny_net(), &mut rng).unwrap();
            EncoderNet::new(&tiny_net(), &mut rng).unwrap()
        };
        assert!(crate::nets::params_equal(
            &crate::nets::snapshot_params(&run.discriminator),
            &crate::nets::snapshot_params(&fresh)
        ));
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let mut d = tiny_domain();
        d.samples.retain(|s| s.pad_label == PadLabel::Live);
        let d = DomainDataset::new(d.domain_id.clone(), d.samples, d.split_tag).unwrap();
        assert!(train_pad_gan(&d, &tiny_net(), &DRConfig::default(), &NoAudit).is_err());
    }

    #[test]
    fn id_gan_head_matches_subject_count() {
        let cfg = DRConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let run = train_id_gan(&tiny_domain(), &tiny_net(), &cfg, &NoAudit).unwrap();
        assert_eq!(run.discriminator.num_classes(), 3);
        assert_eq!(run.history.len(), 1);
        assert!(run.history[0].all_finite());
    }

    #[test]
    fn softmax_probability_rows_sum_to_one() {
        let p0 = class_probability(&[1.0, 2.0, -3.0, 0.5], 2, 0);
        let p1 = class_probability(&[1.0, 2.0, -3.0, 0.5], 2, 1);
        for (a, b) in p0.iter().zip(&p1) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
        assert!((p1[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-7);
    }

    #[test]
    fn config_rejects_zero_batch() {
        assert!(DRConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DRConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
