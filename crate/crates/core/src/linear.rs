//! Full-batch linear models on frozen features: binary logistic regression
//! (exported as a [`LinearClassifier`]) and multinomial softmax probes.
//!
//! Features are standardized per column before fitting and the scaling is
//! folded back into the returned weights, so callers feed raw features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::LinearClassifier;
use crate::objectives::{aux_class_loss, binary_ce};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on standardized-space weights.
    pub l2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 200,
            lr: 1e-2,
            l2: 1e-4,
        }
    }
}

impl FitOptions {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{prefix}.lr"), "must be positive and finite"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config(format!("{prefix}.l2"), "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// Per-column mean and standard deviation (1 for constant columns).
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.batch(), x.item_len());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.item(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(x.item(r)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    fn apply(&self, x: &Tensor) -> Vec<f64> {
        let d = self.mean.len();
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v as f64 - self.mean[i % d]) / self.scale[i % d])
            .collect()
    }

    /// Raw-space `(W, b)` for standardized-space `(w, c)`, row-major `[k, d]`.
    fn fold(&self, w: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.mean.len();
        let mut wr = vec![0.0; w.len()];
        let mut br = c.to_vec();
        for (k, row) in w.chunks(d).enumerate() {
            for j in 0..d {
                wr[k * d + j] = row[j] / self.scale[j];
                br[k] -= row[j] * self.mean[j] / self.scale[j];
            }
        }
        (wr, br)
    }
}

/// Adam state for a flat parameter vector.
struct AdamF64 {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamF64 {
    fn new(n: usize, lr: f64) -> Self {
        AdamF64 {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..p.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

fn check_rows(x: &Tensor, n: usize, what: &str) -> Result<()> {
    if x.shape().len() != 2 || x.batch() != n {
        return Err(Error::shape(what, &[n, x.item_len()], x.shape()));
    }
    if n == 0 {
        return Err(Error::EmptyBatch("linear fit"));
    }
    Ok(())
}

/// `x·Wᵀ + b` in f64 for row-major `[k, d]` weights.
fn logits(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let k = b.len();
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for c in 0..k {
            out.push(b[c] + row.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

/// Gradient of the mean loss w.r.t. `(W, b)` from logit gradients.
fn param_grads(x: &[f64], n: usize, d: usize, gz: &[f64], k: usize, w: &[f64], l2: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gw: Vec<f64> = w.iter().map(|v| l2 * v).collect();
    let mut gb = vec![0.0; k];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        for c in 0..k {
            let g = gz[r * k + c];
            gb[c] += g;
            for (acc, &xv) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                *acc += g * xv;
            }
        }
    }
    (gw, gb)
}

/// Binary logistic regression on `[n, d]` features with live = 1 labels.
pub fn fit_logistic(x: &Tensor, labels: &[u8], opts: &FitOptions) -> Result<LinearClassifier> {
    opts.validate("fit")?;
    check_rows(x, labels.len(), "logistic features")?;
    let (n, d) = (x.batch(), x.item_len());
    let st = Standardizer::fit(x);
    let z = st.apply(x);
    let (mut w, mut b) = (vec![0.0; d], vec![0.0]);
    let mut opt_w = AdamF64::new(d, opts.lr);
    let mut opt_b = AdamF64::new(1, opts.lr);
    for _ in 0..opts.epochs {
        let gz = binary_ce(&logits(&z, n, d, &w, &b), labels)?.grads.remove(0);
        let (gw, gb) = param_grads(&z, n, d, &gz, 1, &w, opts.l2);
        opt_w.step(&mut w, &gw);
        opt_b.step(&mut b, &gb);
    }
    let (wr, br) = st.fold(&w, &b);
    Ok(LinearClassifier::from_weights(wr.iter().map(|&v| v as f32).collect(), br[0] as f32))
}

/// Multinomial logistic regression over `classes` dense labels.
#[derive(Debug, Clone)]
pub struct SoftmaxProbe {
    weights: Vec<f64>,
    bias: Vec<f64>,
    dim: usize,
}

impl SoftmaxProbe {
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, opts: &FitOptions) -> Result<Self> {
        opts.validate("probe")?;
        check_rows(x, labels.len(), "probe features")?;
        let (n, d) = (x.batch(), x.item_len());
        let st = Standardizer::fit(x);
        let z = st.apply(x);
        let (mut w, mut b) = (vec![0.0; classes * d], vec![0.0; classes]);
        let mut opt_w = AdamF64::new(w.len(), opts.lr);
        let mut opt_b = AdamF64::new(classes, opts.lr);
        for _ in 0..opts.epochs {
            let gz = aux_class_loss(&logits(&z, n, d, &w, &b), labels, &[], &[], classes)?
                .grads
                .remove(0);
            let (gw, gb) = param_grads(&z, n, d, &gz, classes, &w, opts.l2);
            opt_w.step(&mut w, &gw);
            opt_b.step(&mut b, &gb);
        }
        let (weights, bias) = st.fold(&w, &b);
        Ok(SoftmaxProbe { weights, bias, dim: d })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.shape().len() != 2 || x.item_len() != self.dim {
            return Err(Error::shape("probe input", &[x.batch(), self.dim], x.shape()));
        }
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let k = self.bias.len();
        Ok(logits(&xs, x.batch(), self.dim, &self.weights, &self.bias)
            .chunks(k)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(x)?;
        if p.is_empty() {
            return Err(Error::EmptyBatch("probe accuracy"));
        }
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
    }
}

/// Fraction of rows where `σ(logit) ≥ 0.5` matches the label.
pub fn binary_accuracy(clf: &LinearClassifier, x: &Tensor, labels: &[u8]) -> Result<f64> {
    let s = clf.scores(x)?;
    if s.is_empty() {
        return Err(Error::EmptyBatch("binary accuracy"));
    }
    Ok(s.iter().zip(labels).filter(|(p, &y)| (**p >= 0.5) == (y == 1)).count() as f64 / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Tensor, Vec<u8>) {
        // Separable on column 0 (offset and scaled), column 1 constant.
        let mut d = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let live = i % 2 == 0;
            d.push(if live { 105.0 } else { 95.0 } + (i as f32) * 0.1);
            d.push(3.0);
            y.push(live as u8);
        }
        (Tensor::new(vec![20, 2], d).unwrap(), y)
    }

    #[test]
    fn logistic_separates_raw_features_after_folding() {
        let (x, y) = toy();
        let clf = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
        assert_eq!(binary_accuracy(&clf, &x, &y).unwrap(), 1.0);
        assert!(clf.weights()[0] > 0.0);
    }

    #[test]
    fn softmax_probe_learns_one_hot_classes() {
        let n = 30;
        let mut d = vec![0.0; n * 3];
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        for (i, &c) in labels.iter().enumerate() {
            d[i * 3 + c] = 1.0;
        }
        let x = Tensor::new(vec![n, 3], d).unwrap();
        let p = SoftmaxProbe::fit(&x, &labels, 3, &FitOptions::default()).unwrap();
        assert_eq!(p.accuracy(&x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn standardizer_fold_reproduces_logits() {
        let (x, _) = toy();
        let st = Standardizer::fit(&x);
        let w = [0.7, -0.2];
        let b = [0.3];
        let z = st.apply(&x);
        let (wr, br) = st.fold(&w, &b);
        let raw: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let a = logits(&z, 20, 2, &w, &b);
        let c = logits(&raw, 20, 2, &wr, &br);
        for (u, v) in a.iter().zip(&c) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
