//! Scoring, biometric metrics, leave-domain-out protocols, the identity
//! leakage probe and feature export.
//!
//! A score is the live probability of one image. A sample is accepted as
//! live when `score ≥ τ`; FAR is the accepted fraction of spoofs and FRR
//! the rejected fraction of live samples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datakit::{DomainDataset, PadLabel};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::linear::{FitOptions, SoftmaxProbe};
use crate::mdnet::pad_features;
use crate::nets::{EncoderNet, LinearClassifier};
use crate::tensor::Tensor;

/// Live probabilities with their ground truth (live = 1, spoof = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub source: String,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("score labels", &[scores.len()], &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::LabelOutOfRange {
                label: l as usize,
                classes: 2,
            });
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::config("scores", format!("score {s} outside [0, 1]")));
        }
        Ok(ScoreSet {
            scores,
            labels,
            source: source.into(),
        })
    }

    /// Builds a set from `live` and `spoof` score lists.
    pub fn from_classes(live: &[f64], spoof: &[f64], source: impl Into<String>) -> Result<Self> {
        let scores = live.iter().chain(spoof).copied().collect();
        let labels = std::iter::repeat_n(1, live.len())
            .chain(std::iter::repeat_n(0, spoof.len()))
            .collect();
        Self::new(scores, labels, source)
    }

    /// Concatenation of several sets.
    pub fn pooled(sets: &[ScoreSet], source: impl Into<String>) -> Result<Self> {
        let scores = sets.iter().flat_map(|s| s.scores.iter().copied()).collect();
        let labels = sets.iter().flat_map(|s| s.labels.iter().copied()).collect();
        Self::new(scores, labels, source)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(live, spoof)` counts.
    pub fn counts(&self) -> (usize, usize) {
        let live = self.labels.iter().filter(|&&l| l == 1).count();
        (live, self.len() - live)
    }

    /// Sorted `(live, spoof)` scores; errors unless both are non-empty.
    fn split_sorted(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (live, spoof) = self.counts();
        if live == 0 || spoof == 0 {
            return Err(Error::SingleClass { live, spoof });
        }
        let mut l: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == 1)
            .map(|(s, _)| *s)
            .collect();
        let mut s: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == 0)
            .map(|(s, _)| *s)
            .collect();
        l.sort_by(f64::total_cmp);
        s.sort_by(f64::total_cmp);
        Ok((l, s))
    }
}

/// Fraction of `sorted` values `≥ t`.
fn frac_at_least(sorted: &[f64], t: f64) -> f64 {
    (sorted.len() - sorted.partition_point(|&v| v < t)) as f64 / sorted.len() as f64
}

/// Fraction of `sorted` values `< t`.
fn frac_below(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|&v| v < t) as f64 / sorted.len() as f64
}

fn rates(live: &[f64], spoof: &[f64], t: f64) -> (f64, f64) {
    (frac_at_least(spoof, t), frac_below(live, t))
}

/// Threshold minimizing `|FAR − FRR|` over `{0, 1}` and the midpoints of
/// consecutive distinct scores; ties go to the smaller threshold.
pub fn eer_threshold(s: &ScoreSet) -> Result<f64> {
    let (live, spoof) = s.split_sorted()?;
    let mut all: Vec<f64> = s.scores.clone();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut cands: Vec<f64> = all.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    cands.push(0.0);
    cands.push(1.0);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for t in cands {
        let (far, frr) = rates(&live, &spoof, t);
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HterResult {
    pub far: f64,
    pub frr: f64,
    pub hter_percent: f64,
}

pub fn hter(s: &ScoreSet, threshold: f64) -> Result<HterResult> {
    let (live, spoof) = s.split_sorted()?;
    let (far, frr) = rates(&live, &spoof, threshold);
    Ok(HterResult {
        far,
        frr,
        hter_percent: (far + frr) / 2.0 * 100.0,
    })
}

/// Area under the ROC curve in percent, from mid-ranks (ties count ½).
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (live, spoof) = s.counts();
    if live == 0 || spoof == 0 {
        return Err(Error::SingleClass { live, spoof });
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| s.labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (nl, ns) = (live as f64, spoof as f64);
    Ok((rank_sum - nl * (nl + 1.0) / 2.0) / (nl * ns) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub hter_percent: f64,
    pub auc_percent: f64,
    pub eer_threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub live_count: usize,
    pub spoof_count: usize,
}

impl EvalReport {
    /// Metrics of `test` at `threshold` (normally chosen on validation data).
    pub fn evaluate(test: &ScoreSet, threshold: f64) -> Result<Self> {
        let h = hter(test, threshold)?;
        let (live_count, spoof_count) = test.counts();
        Ok(EvalReport {
            source: test.source.clone(),
            hter_percent: h.hter_percent,
            auc_percent: auc(test)?,
            eer_threshold: threshold,
            far: h.far,
            frr: h.frr,
            live_count,
            spoof_count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    I,
    II,
    III,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::I => "I",
            Protocol::II => "II",
            Protocol::III => "III",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Protocol::I),
            "II" | "2" => Ok(Protocol::II),
            "III" | "3" => Ok(Protocol::III),
            other => Err(Error::config("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub train_domains: Vec<String>,
    pub test_domain: String,
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_domains.is_empty() {
            return Err(Error::config("protocol.train_domains", "must not be empty"));
        }
        if self.train_domains.contains(&self.test_domain) {
            return Err(Error::config("protocol.test_domain", "must not be a training domain"));
        }
        let mut seen = self.train_domains.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.train_domains.len() {
            return Err(Error::config("protocol.train_domains", "contains duplicates"));
        }
        if self.protocol == Protocol::III && self.train_domains.len() != 1 {
            return Err(Error::config("protocol.train_domains", "protocol III trains on exactly one domain"));
        }
        Ok(())
    }

    /// `[a, b]→c` style label.
    pub fn label(&self) -> String {
        format!("[{}]->{}", self.train_domains.join(","), self.test_domain)
    }
}

/// Every spec of `protocol` over `ids`: I leaves one domain out, II trains
/// on each unordered pair and tests on each remaining domain, III pairs
/// every ordered (source, target).
pub fn enumerate_protocols(ids: &[String], protocol: Protocol) -> Result<Vec<ProtocolSpec>> {
    if ids.len() < 2 {
        return Err(Error::config("domains", "need at least two domain ids"));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::config("domains", "domain ids must be distinct"));
    }
    let spec = |train: Vec<&String>, test: &String| ProtocolSpec {
        protocol,
        train_domains: train.into_iter().cloned().collect(),
        test_domain: test.clone(),
    };
    let n = ids.len();
    let mut out = Vec::new();
    match protocol {
        Protocol::I => {
            for t in 0..n {
                out.push(spec(
                    ids.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, d)| d).collect(),
                    &ids[t],
                ));
            }
        }
        Protocol::II => {
            if n < 3 {
                return Err(Error::config("domains", "protocol II needs at least three domains"));
            }
            for a in 0..n {
                for b in a + 1..n {
                    for t in (0..n).filter(|&t| t != a && t != b) {
                        out.push(spec(vec![&ids[a], &ids[b]], &ids[t]));
                    }
                }
            }
        }
        Protocol::III => {
            for s in 0..n {
                for t in (0..n).filter(|&t| t != s) {
                    out.push(spec(vec![&ids[s]], &ids[t]));
                }
            }
        }
    }
    Ok(out)
}

/// `σ(F_MD(⊕ᵢ E_PAD^i(x)))` for every sample, in dataset order.
pub fn infer_scores(pad_encoders: &[&EncoderNet], f_md: &LinearClassifier, dataset: &DomainDataset) -> Result<ScoreSet> {
    let width: usize = pad_encoders.iter().map(|e| e.feature_dim()).sum();
    if f_md.inputs() != width {
        return Err(Error::shape("final classifier input", &[width], &[f_md.inputs()]));
    }
    let x = pad_features(pad_encoders, dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    ScoreSet::new(f_md.scores(&x)?, dataset.targets(&all), dataset.domain_id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub subject_probe_acc: f64,
    pub liveness_probe_acc: f64,
}

/// Held-out accuracies of two linear probes (subject, liveness) on frozen
/// features. The split is fixed: within every (subject, label) group,
/// alternate samples go to the training and held-out halves.
pub fn disentanglement_probe(features: &Tensor, subject_ids: &[usize], pad_labels: &[PadLabel], opts: &FitOptions) -> Result<ProbeResult> {
    let n = features.batch();
    if features.shape().len() != 2 || subject_ids.len() != n || pad_labels.len() != n {
        return Err(Error::shape(
            "probe inputs",
            &[n, features.item_len()],
            &[subject_ids.len(), pad_labels.len()],
        ));
    }
    let subjects: BTreeMap<usize, usize> = {
        let mut ids: Vec<usize> = subject_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    if subjects.len() < 2 {
        return Err(Error::config("subject_ids", "probe needs at least two subjects"));
    }
    let live = pad_labels.iter().filter(|l| **l == PadLabel::Live).count();
    if live == 0 || live == n {
        return Err(Error::SingleClass { live, spoof: n - live });
    }
    let mut seen: BTreeMap<(usize, PadLabel), usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..n {
        let c = seen.entry((subject_ids[i], pad_labels[i])).or_default();
        if (*c).is_multiple_of(2) { &mut train } else { &mut test }.push(i);
        *c += 1;
    }
    if test.is_empty() {
        return Err(Error::config("features", "too few samples for a held-out probe split"));
    }
    let rows = |idx: &[usize]| -> Result<Tensor> {
        let items: Vec<&[f32]> = idx.iter().map(|&i| features.item(i)).collect();
        Tensor::stack(&items, &[features.item_len()])
    };
    let (xtr, xte) = (rows(&train)?, rows(&test)?);
    let subj = |idx: &[usize]| idx.iter().map(|&i| subjects[&subject_ids[i]]).collect::<Vec<_>>();
    let live_lab = |idx: &[usize]| idx.iter().map(|&i| pad_labels[i].as_target() as usize).collect::<Vec<_>>();
    let sp = SoftmaxProbe::fit(&xtr, &subj(&train), subjects.len(), opts)?;
    let lp = SoftmaxProbe::fit(&xtr, &live_lab(&train), 2, opts)?;
    Ok(ProbeResult {
        subject_probe_acc: sp.accuracy(&xte, &subj(&test))?,
        liveness_probe_acc: lp.accuracy(&xte, &live_lab(&test))?,
    })
}

/// Per-row identification for exported features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub domain_id: String,
    pub subject_id: usize,
    pub pad_label: PadLabel,
}

impl FeatureMeta {
    pub fn of_dataset(d: &DomainDataset) -> Vec<FeatureMeta> {
        d.samples
            .iter()
            .map(|s| FeatureMeta {
                domain_id: s.domain_id.clone(),
                subject_id: s.subject_id,
                pad_label: s.pad_label,
            })
            .collect()
    }
}

/// CSV with header `domain_id,subject_id,pad_label,f0..f{D−1}` and one row
/// per feature vector, in input order.
pub fn export_features_csv(features: &Tensor, meta: &[FeatureMeta], path: &Path) -> Result<()> {
    if features.shape().len() != 2 || features.batch() != meta.len() {
        return Err(Error::shape(
            "exported features",
            &[meta.len(), features.item_len()],
            features.shape(),
        ));
    }
    let d = features.shape()[1];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["domain_id".to_string(), "subject_id".into(), "pad_label".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, m) in meta.iter().enumerate() {
        let mut rec = vec![m.domain_id.clone(), m.subject_id.to_string(), m.pad_label.to_string()];
        rec.extend(features.item(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("flush features csv", e.into_error()))?;
    atomic_write(path, &bytes)
}

/// Reads a file written by [`export_features_csv`].
pub fn read_features_csv(path: &Path) -> Result<(Tensor, Vec<FeatureMeta>)> {
    let mut r = csv::Reader::from_path(path)?;
    let d = r.headers()?.len().saturating_sub(3);
    let mut data = Vec::new();
    let mut meta = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::IndexRow { row: i + 1, reason };
        let pad_label = rec[2].parse().map_err(bad)?;
        meta.push(FeatureMeta {
            domain_id: rec[0].to_string(),
            subject_id: rec[1].parse().map_err(|e| bad(format!("subject_id: {e}")))?,
            pad_label,
        });
        for v in rec.iter().skip(3) {
            data.push(v.parse::<f32>().map_err(|e| bad(format!("feature: {e}")))?);
        }
    }
    Ok((Tensor::new(vec![meta.len(), d], data)?, meta))
}

/// Results across protocol specs: one row per method, HTER% and AUC% per spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub specs: Vec<String>,
    pub rows: Vec<(String, Vec<EvalReport>)>,
}

impl ResultsTable {
    pub fn new(specs: Vec<String>) -> Self {
        ResultsTable { specs, rows: Vec::new() }
    }

    pub fn push(&mut self, method: impl Into<String>, reports: Vec<EvalReport>) -> Result<()> {
        if reports.len() != self.specs.len() {
            return Err(Error::shape("results row", &[self.specs.len()], &[reports.len()]));
        }
        self.rows.push((method.into(), reports));
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        for s in &self.specs {
            header.push(format!("{s} HTER%"));
            header.push(format!("{s} AUC%"));
        }
        w.write_record(&header)?;
        for (m, reps) in &self.rows {
            let mut rec = vec![m.clone()];
            for r in reps {
                rec.push(format!("{:.2}", r.hter_percent));
                rec.push(format!("{:.2}", r.auc_percent));
            }
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::io("flush results csv", e.into_error()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(live: &[f64], spoof: &[f64]) -> ScoreSet {
        ScoreSet::from_classes(live, spoof, "t").unwrap()
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer_threshold(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.5);
        assert_eq!(eer_threshold(&set(&[1.0], &[0.0])).unwrap(), 0.5);
        let s = set(&[0.2, 0.4], &[0.1, 0.3]);
        let t = eer_threshold(&s).unwrap();
        let h = hter(&s, t).unwrap();
        assert_eq!((h.far, h.frr), (0.5, 0.5));
    }

    #[test]
    fn hter_examples() {
        let h = hter(&set(&[0.9, 0.8], &[0.2, 0.6]), 0.5).unwrap();
        assert_eq!((h.far, h.frr, h.hter_percent), (0.5, 0.0, 25.0));
        let h = hter(&set(&[0.5, 0.5], &[0.5]), 0.5).unwrap();
        assert_eq!((h.far, h.frr, h.hter_percent), (1.0, 0.0, 50.0));
        assert_eq!(hter(&set(&[0.9], &[0.1]), 0.5).unwrap().hter_percent, 0.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.4], &[0.3, 0.8])).unwrap(), 75.0);
        assert_eq!(auc(&set(&[0.9], &[0.1, 0.2])).unwrap(), 100.0);
        assert_eq!(auc(&set(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 50.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = set(&[0.9, 0.2], &[]);
        assert!(matches!(eer_threshold(&s), Err(Error::SingleClass { live: 2, spoof: 0 })));
        assert!(hter(&s, 0.5).is_err());
        assert!(auc(&s).is_err());
    }

    #[test]
    fn score_set_validation() {
        assert!(ScoreSet::new(vec![0.5], vec![1, 0], "x").is_err());
        assert!(ScoreSet::new(vec![1.5], vec![1], "x").is_err());
        assert!(ScoreSet::new(vec![0.5], vec![2], "x").is_err());
    }

    #[test]
    fn protocol_counts_over_four_domains() {
        let ids: Vec<String> = ["O", "C", "I", "M"].iter().map(|s| s.to_string()).collect();
        let one = enumerate_protocols(&ids, Protocol::I).unwrap();
        assert_eq!(one.len(), 4);
        assert!(one.iter().all(|s| s.train_domains.len() == 3 && s.validate().is_ok()));
        let two = enumerate_protocols(&ids, Protocol::II).unwrap();
        assert_eq!(two.len(), 12);
        assert!(two.iter().all(|s| s.train_domains.len() == 2 && s.validate().is_ok()));
        let three = enumerate_protocols(&ids, Protocol::III).unwrap();
        assert_eq!(three.len(), 12);
        assert!(three.iter().all(|s| s.train_domains.len() == 1 && s.validate().is_ok()));
        assert!(enumerate_protocols(&["a".into(), "a".into()], Protocol::I).is_err());
    }

    #[test]
    fn feature_csv_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let x = Tensor::new(vec![10, 4], (0..40).map(|i| i as f32 * 0.123_456_7 - 2.0).collect()).unwrap();
        let meta: Vec<FeatureMeta> = (0..10)
            .map(|i| FeatureMeta {
                domain_id: "syn0".into(),
                subject_id: i % 3,
                pad_label: if i % 2 == 0 { PadLabel::Live } else { PadLabel::Spoof },
            })
            .collect();
        export_features_csv(&x, &meta, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.lines().all(|l| l.split(',').count() == 7));
        let (y, m) = read_features_csv(&p).unwrap();
        assert_eq!(m, meta);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        export_features_csv(&Tensor::zeros(&[0, 4]), &[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "domain_id,subject_id,pad_label,f0,f1,f2,f3\n");
    }

    #[test]
    fn probe_on_separable_constructions() {
        let n = 48;
        let subjects: Vec<usize> = (0..n).map(|i| (i / 2) % 4).collect();
        let labels: Vec<PadLabel> = (0..n).map(|i| if i % 2 == 0 { PadLabel::Live } else { PadLabel::Spoof }).collect();
        let mut onehot = vec![0.0; n * 4];
        for (i, &s) in subjects.iter().enumerate() {
            onehot[i * 4 + s] = 1.0;
        }
        let r = disentanglement_probe(
            &Tensor::new(vec![n, 4], onehot).unwrap(),
            &subjects,
            &labels,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(r.subject_probe_acc, 1.0);
        let rep: Vec<f32> = labels.iter().map(|l| l.as_target() as f32).collect();
        let r = disentanglement_probe(&Tensor::new(vec![n, 1], rep).unwrap(), &subjects, &labels, &FitOptions::default()).unwrap();
        assert_eq!(r.liveness_probe_acc, 1.0);
    }

    #[test]
    fn results_table_layout() {
        let rep = EvalReport::evaluate(&set(&[0.9], &[0.1]), 0.5).unwrap();
        let mut t = ResultsTable::new(vec!["[a,b]->c".into()]);
        t.push("full", vec![rep]).unwrap();
        let csv = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(csv, "method,\"[a,b]->c HTER%\",\"[a,b]->c AUC%\"\nfull,0.00,100.00\n");
    }
}
