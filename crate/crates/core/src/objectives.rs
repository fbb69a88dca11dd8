//! Training objectives, evaluated in `f64` together with their analytic
//! gradients with respect to the network outputs they consume.
//!
//! Labels: live = 1, spoof = 0. Every expectation is a batch mean. All
//! logistic terms are computed in logit space through `softplus`, so no
//! probability is ever clamped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    fn single(name: &str, value: f64) -> Self {
        LossValue {
            value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }
}

/// A loss together with its gradient with respect to each input batch,
/// in argument order.
#[derive(Debug, Clone)]
pub struct Graded {
    pub loss: LossValue,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DRWeights {
    pub lambda: f64,
}

impl Default for DRWeights {
    fn default() -> Self {
        DRWeights { lambda: 1.0 }
    }
}

impl DRWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be a positive finite number"));
        }
        Ok(())
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Discriminator side of the adversarial game, as a quantity to minimize:
/// `−mean log σ(real) − mean log(1 − σ(fake))`.
pub fn gan_loss_discriminator(real: &[f64], fake: &[f64]) -> Result<Graded> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch("gan_loss_discriminator"));
    }
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let lr = real.iter().map(|&z| softplus(-z)).sum::<f64>() / nr;
    let lf = fake.iter().map(|&z| softplus(z)).sum::<f64>() / nf;
    let gr = real.iter().map(|&z| (sigmoid(z) - 1.0) / nr).collect();
    let gf = fake.iter().map(|&z| sigmoid(z) / nf).collect();
    Ok(Graded {
        loss: LossValue {
            value: lr + lf,
            components: BTreeMap::from([("real".into(), lr), ("fake".into(), lf)]),
        },
        grads: vec![gr, gf],
    })
}

/// Non-saturating generator loss `−mean log σ(fake)`.
pub fn gan_loss_generator(fake: &[f64]) -> Result<Graded> {
    if fake.is_empty() {
        return Err(Error::EmptyBatch("gan_loss_generator"));
    }
    let n = fake.len() as f64;
    let value = fake.iter().map(|&z| softplus(-z)).sum::<f64>() / n;
    let g = fake.iter().map(|&z| (sigmoid(z) - 1.0) / n).collect();
    Ok(Graded {
        loss: LossValue::single("gan", value),
        grads: vec![g],
    })
}

fn cross_entropy_rows(logits: &[f64], labels: &[usize], classes: usize, denom: f64, total: &mut f64, grad: &mut Vec<f64>) -> Result<()> {
    if logits.len() != labels.len() * classes {
        return Err(Error::shape("class logits", &[labels.len(), classes], &[logits.len()]));
    }
    for (row, &y) in logits.chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
        let lse = m + sum.ln();
        *total += lse - row[y];
        for (k, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            grad.push((p - if k == y { 1.0 } else { 0.0 }) / denom);
        }
    }
    Ok(())
}

/// Mean categorical cross-entropy over the union of a real and a generated
/// batch. Logits are row-major `[n, classes]`; either batch may be empty,
/// but not both.
pub fn aux_class_loss(
    real_logits: &[f64],
    real_labels: &[usize],
    fake_logits: &[f64],
    fake_labels: &[usize],
    classes: usize,
) -> Result<Graded> {
    let n = real_labels.len() + fake_labels.len();
    if n == 0 {
        return Err(Error::EmptyBatch("aux_class_loss"));
    }
    if classes < 2 {
        return Err(Error::config("classes", "need at least two classes"));
    }
    let mut total = 0.0;
    let mut gr = Vec::with_capacity(real_logits.len());
    let mut gf = Vec::with_capacity(fake_logits.len());
    cross_entropy_rows(real_logits, real_labels, classes, n as f64, &mut total, &mut gr)?;
    cross_entropy_rows(fake_logits, fake_labels, classes, n as f64, &mut total, &mut gf)?;
    Ok(Graded {
        loss: LossValue::single("cls", total / n as f64),
        grads: vec![gr, gf],
    })
}

/// Joint adversarial objective `gan + λ·cls`.
pub fn dr_objective(gan_part: f64, cls_part: f64, w: DRWeights) -> LossValue {
    LossValue {
        value: gan_part + w.lambda * cls_part,
        components: BTreeMap::from([("gan".into(), gan_part), ("cls".into(), cls_part)]),
    }
}

/// Mean binary cross-entropy on liveness logits, `−y log p − (1−y) log(1−p)`
/// with `p = σ(logit)`.
///
/// The printed form of the stage-2 classification loss nests a second `log`
/// inside the spoof term, `log(1 − log p)`, which is undefined for most `p`;
/// the standard binary cross-entropy is used instead.
pub fn binary_ce(logits: &[f64], labels: &[u8]) -> Result<Graded> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch("binary_ce"));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape("binary_ce labels", &[logits.len()], &[labels.len()]));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut g = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(Error::LabelOutOfRange {
                label: y as usize,
                classes: 2,
            });
        }
        let y = y as f64;
        total += y * softplus(-z) + (1.0 - y) * softplus(z);
        g.push((sigmoid(z) - y) / n);
    }
    Ok(Graded {
        loss: LossValue::single("ce", total / n),
        grads: vec![g],
    })
}

/// Batch mean of per-image mean absolute error. Both batches are flattened
/// `[batch, pixels]` with `pixels = original.len() / batch`; the gradient is
/// with respect to the reconstruction.
pub fn l1_reconstruction(original: &[f64], reconstructed: &[f64], batch: usize) -> Result<Graded> {
    if original.len() != reconstructed.len() {
        return Err(Error::shape("l1_reconstruction", &[original.len()], &[reconstructed.len()]));
    }
    if batch == 0 || original.is_empty() {
        return Err(Error::EmptyBatch("l1_reconstruction"));
    }
    if !original.len().is_multiple_of(batch) {
        return Err(Error::shape("l1_reconstruction batch", &[batch], &[original.len()]));
    }
    let n = original.len() as f64;
    let mut total = 0.0;
    let mut g = Vec::with_capacity(original.len());
    for (&x, &r) in original.iter().zip(reconstructed) {
        let d = r - x;
        total += d.abs();
        g.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    Ok(Graded {
        loss: LossValue::single("rec", total / n),
        grads: vec![g],
    })
}
