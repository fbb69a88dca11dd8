//! End-to-end training on source domains and protocol execution.

use serde::{Deserialize, Serialize};

use crate::datakit::{DomainDataset, PadLabel};
use crate::drnet::{live_probability, train_dr_all, train_pad_gan, train_plain_all, train_plain_encoder, DRConfig, DomainDr, Target};
use crate::error::{Error, Result};
use crate::evalkit::{disentanglement_probe, eer_threshold, infer_scores, EvalReport, ProbeResult, Protocol, ProtocolSpec, ScoreSet};
use crate::history::{DataAudit, EpochRecord};
use crate::linear::FitOptions;
use crate::mdnet::{generalize_to_n_domains, pad_features, train_final_classifier, MDConfig};
use crate::nets::{DecoderNet, EncoderNet, LinearClassifier, NetConfig};
use crate::seeding;
use crate::tensor::Tensor;

/// Ablation switches. `no_dr` replaces both adversarial trainers with plain
/// classifiers; `no_md` skips stage 2 and fits the final classifier on
/// stage-1 PAD features; `no_ce` / `no_rec` drop one stage-2 loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub no_dr: bool,
    #[serde(default)]
    pub no_md: bool,
    #[serde(default)]
    pub no_ce: bool,
    #[serde(default)]
    pub no_rec: bool,
}

impl Ablation {
    pub fn baseline() -> Self {
        Ablation {
            no_dr: true,
            no_md: true,
            ..Default::default()
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.no_dr, "DR"), (self.no_md, "MD"), (self.no_ce, "CE"), (self.no_rec, "REC")] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", parts.join("+"))
        }
    }

    pub fn md_config(&self, md: &MDConfig) -> MDConfig {
        let mut md = md.clone();
        md.loss_flags.use_ce &= !self.no_ce;
        md.loss_flags.use_rec &= !self.no_rec;
        md
    }
}

fn default_val_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub dr: DRConfig,
    #[serde(default)]
    pub md: MDConfig,
    /// Held-out share of every source domain, used for the threshold.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub probe: FitOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            net: NetConfig::desk(),
            dr: DRConfig::default(),
            md: MDConfig::default(),
            val_fraction: default_val_fraction(),
            probe: FitOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, ablation: &Ablation) -> Result<()> {
        self.net.validate()?;
        self.dr.validate()?;
        if !ablation.no_md {
            ablation.md_config(&self.md).validate()?;
        } else {
            self.md.final_fit.validate("md.final_fit")?;
        }
        self.probe.validate("probe")?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }

    /// Copy with every stage seeded from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.dr.seed = seeding::derive(seed, "dr");
        c.md.seed = seeding::derive(seed, "md");
        c
    }
}

/// Stage-2 state besides the PAD encoders.
pub struct Stage2Extras {
    pub id_encoders: Vec<EncoderNet>,
    pub classifiers: Vec<LinearClassifier>,
    pub decoders: Vec<DecoderNet>,
    pub history: Vec<EpochRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Everything needed to score target images.
pub struct SourceModel {
    pub domain_ids: Vec<String>,
    pub pad_encoders: Vec<EncoderNet>,
    pub f_md: LinearClassifier,
    pub stage2: Option<Stage2Extras>,
}

impl SourceModel {
    pub fn encoders(&self) -> Vec<&EncoderNet> {
        self.pad_encoders.iter().collect()
    }

    pub fn scores(&self, dataset: &DomainDataset) -> Result<ScoreSet> {
        infer_scores(&self.encoders(), &self.f_md, dataset)
    }
}

pub fn stage1(train: &[DomainDataset], cfg: &PipelineConfig, ablation: &Ablation, audit: &dyn DataAudit) -> Result<Vec<DomainDr>> {
    if ablation.no_dr {
        train_plain_all(train, &cfg.net, &cfg.dr, audit)
    } else {
        train_dr_all(train, &cfg.net, &cfg.dr, audit)
    }
}

/// Stage 2 (unless ablated) and the final classifier.
pub fn stage2(
    stage1: Vec<DomainDr>,
    train: &[DomainDataset],
    cfg: &PipelineConfig,
    ablation: &Ablation,
    audit: &dyn DataAudit,
) -> Result<SourceModel> {
    let domain_ids: Vec<String> = stage1.iter().map(|d| d.pair.domain_id.clone()).collect();
    if ablation.no_md {
        let pad_encoders: Vec<EncoderNet> = stage1.into_iter().map(|d| d.pair.e_pad).collect();
        let refs: Vec<&EncoderNet> = pad_encoders.iter().collect();
        let f_md = train_final_classifier(&refs, train, &cfg.md.final_fit)?;
        return Ok(SourceModel {
            domain_ids,
            pad_encoders,
            f_md,
            stage2: None,
        });
    }
    let md = ablation.md_config(&cfg.md);
    let run = generalize_to_n_domains(stage1.into_iter().map(|d| d.pair).collect(), train, &md, audit)?;
    let refs: Vec<&EncoderNet> = run.pad_encoders.iter().collect();
    let f_md = train_final_classifier(&refs, train, &md.final_fit)?;
    Ok(SourceModel {
        domain_ids,
        pad_encoders: run.pad_encoders,
        f_md,
        stage2: Some(Stage2Extras {
            id_encoders: run.id_encoders,
            classifiers: run.classifiers,
            decoders: run.decoders,
            history: run.history,
            initial_loss: run.initial_loss,
            final_loss: run.final_loss,
        }),
    })
}

pub fn train_source_model(
    train: &[DomainDataset],
    cfg: &PipelineConfig,
    ablation: &Ablation,
    audit: &dyn DataAudit,
) -> Result<SourceModel> {
    cfg.validate(ablation)?;
    let s1 = stage1(train, cfg, ablation, audit)?;
    stage2(s1, train, cfg, ablation, audit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub spec: ProtocolSpec,
    pub method: String,
    pub seed: u64,
    pub report: EvalReport,
    /// Probe on the scoring features of the test domain.
    pub probe: Option<ProbeResult>,
    /// Full-data stage-2 loss before and after training.
    pub md_loss: Option<(f64, f64)>,
}

fn find<'a>(datasets: &'a [DomainDataset], id: &str) -> Result<&'a DomainDataset> {
    datasets.iter().find(|d| d.domain_id == id).ok_or_else(|| Error::Dataset {
        domain: id.into(),
        reason: "domain not available".into(),
    })
}

/// Source splits and the test domain of one protocol spec.
pub struct ProtocolData {
    pub train: Vec<DomainDataset>,
    pub val: Vec<DomainDataset>,
    pub test: DomainDataset,
}

/// Splits every training domain of `spec` into train/validation parts,
/// each with its own stream derived from `seed`.
pub fn protocol_data(spec: &ProtocolSpec, datasets: &[DomainDataset], val_fraction: f64, seed: u64) -> Result<ProtocolData> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for id in &spec.train_domains {
        let (tr, va) = find(datasets, id)?.split(val_fraction, seeding::derive(seed, &format!("split/{id}")))?;
        train.push(tr);
        val.push(va);
    }
    Ok(ProtocolData {
        train,
        val,
        test: find(datasets, &spec.test_domain)?.clone(),
    })
}

/// Scores from the liveness class head of a single encoder.
pub fn head_scores(e: &EncoderNet, dataset: &DomainDataset) -> Result<ScoreSet> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    ScoreSet::new(live_probability(e, dataset)?, dataset.targets(&all), dataset.domain_id.clone())
}

/// Test metrics at the EER threshold of the pooled validation scores.
pub fn report_at_validation_eer(val: &[ScoreSet], test: &ScoreSet) -> Result<EvalReport> {
    let tau = eer_threshold(&ScoreSet::pooled(val, "validation")?)?;
    EvalReport::evaluate(test, tau)
}

/// Protocol III trains only the liveness trainer of its single source.
pub fn train_single_liveness(
    train: &DomainDataset,
    cfg: &PipelineConfig,
    ablation: &Ablation,
    audit: &dyn DataAudit,
) -> Result<EncoderNet> {
    Ok(if ablation.no_dr {
        train_plain_encoder(train, Target::Liveness, &cfg.net, &cfg.dr, audit)?.0
    } else {
        train_pad_gan(train, &cfg.net, &cfg.dr, audit)?.discriminator
    })
}

/// Trains on the spec's source domains (minus their validation splits),
/// fixes τ at the EER of the pooled validation scores and reports the
/// test domain at that τ. Protocol III scores with the liveness
/// discriminator's class head directly.
pub fn run_protocol(
    spec: &ProtocolSpec,
    datasets: &[DomainDataset],
    cfg: &PipelineConfig,
    ablation: &Ablation,
    seed: u64,
    with_probe: bool,
    audit: &dyn DataAudit,
) -> Result<ProtocolOutcome> {
    cfg.validate(ablation)?;
    let cfg = cfg.seeded(seed);
    let data = protocol_data(spec, datasets, cfg.val_fraction, seed)?;
    let test = &data.test;
    let (val_scores, test_scores, test_features, md_loss) = if spec.protocol == Protocol::III {
        let e = train_single_liveness(&data.train[0], &cfg, ablation, audit)?;
        let f = if with_probe { Some(pad_features(&[&e], test)?) } else { None };
        (vec![head_scores(&e, &data.val[0])?], head_scores(&e, test)?, f, None)
    } else {
        let model = train_source_model(&data.train, &cfg, ablation, audit)?;
        let vs: Vec<ScoreSet> = data.val.iter().map(|v| model.scores(v)).collect::<Result<_>>()?;
        let f = if with_probe {
            Some(pad_features(&model.encoders(), test)?)
        } else {
            None
        };
        let md = model.stage2.as_ref().map(|s| (s.initial_loss, s.final_loss));
        (vs, model.scores(test)?, f, md)
    };
    let report = report_at_validation_eer(&val_scores, &test_scores)?;
    let probe = test_features.map(|f| probe_dataset(&f, test, &cfg.probe)).transpose()?;
    Ok(ProtocolOutcome {
        spec: spec.clone(),
        method: ablation.label(),
        seed,
        report,
        probe,
        md_loss,
    })
}

/// Identity/liveness probes of `features` (rows aligned with `dataset`).
pub fn probe_dataset(features: &Tensor, dataset: &DomainDataset, opts: &FitOptions) -> Result<ProbeResult> {
    let subjects: Vec<usize> = dataset.samples.iter().map(|s| s.subject_id).collect();
    let labels: Vec<PadLabel> = dataset.samples.iter().map(|s| s.pad_label).collect();
    disentanglement_probe(features, &subjects, &labels, opts)
}
