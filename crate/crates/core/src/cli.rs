//! Config-driven commands. Each one validates the whole [`RunConfig`]
//! before touching `output_dir`, writes its artifacts atomically, and ends
//! with a manifest at `manifests/<command>.json`.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! data/<domain>/index.csv, *.png          synth
//! stage1/<domain>/<role>.ckpt             train-dr
//! stage1/history.jsonl
//! stage2/<domain>/<role>.ckpt             train-md
//! stage2/final_classifier.ckpt
//! stage2/history.jsonl
//! eval/report.json                        eval
//! protocol/results.csv, outcomes.json     protocol-run
//! features/<domain>.csv                   export-features
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Role};
use crate::datakit::{generate_synthetic_domains, load_directory_dataset, write_directory_dataset, DomainDataset, SyntheticSpec};
use crate::drnet::{DRConfig, DomainDr, EncoderPair};
use crate::error::{Error, Result};
use crate::evalkit::{enumerate_protocols, export_features_csv, EvalReport, FeatureMeta, Protocol, ProtocolSpec, ResultsTable, ScoreSet};
use crate::fsutil::{atomic_write, content_hash, file_hash};
use crate::history::{write_jsonl, NoAudit};
use crate::linear::FitOptions;
use crate::mdnet::{pad_features, MDConfig};
use crate::nets::{EncoderNet, LinearClassifier, NetConfig};
use crate::pipeline::{
    head_scores, protocol_data, report_at_validation_eer, run_protocol, stage1, stage2, Ablation, PipelineConfig, ProtocolData, SourceModel,
};

/// One dataset directory in [`DataConfig::Directories`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryDomain {
    pub domain_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    /// Images are resized to `net.resolution` on load.
    Directories(Vec<DirectoryDomain>),
}

/// Which protocol to run. Single-spec commands default to testing on the
/// last domain and training on the others (protocol III: the first other).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSelection {
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_domains: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_domain: Option<String>,
}

impl Default for ProtocolSelection {
    fn default() -> Self {
        ProtocolSelection {
            protocol: Protocol::I,
            train_domains: None,
            test_domain: None,
        }
    }
}

fn default_val_fraction() -> f64 {
    PipelineConfig::default().val_fraction
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub dr: DRConfig,
    #[serde(default)]
    pub md: MDConfig,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub probe: FitOptions,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub protocol: ProtocolSelection,
    pub output_dir: PathBuf,
}

/// Command-line values that replace top-level config fields. Ablation
/// flags can only switch a component off.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub ablation: Ablation,
}

impl RunConfig {
    /// Desk configuration over `num_domains` synthetic domains.
    pub fn desk(num_domains: usize, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let p = PipelineConfig::default();
        RunConfig {
            seed,
            data: DataConfig::Synthetic(SyntheticSpec::desk(num_domains, seed)),
            net: p.net,
            dr: p.dr,
            md: p.md,
            val_fraction: p.val_fraction,
            probe: p.probe,
            ablation: Ablation::default(),
            protocol: ProtocolSelection::default(),
            output_dir: output_dir.into(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        self.ablation.no_dr |= o.ablation.no_dr;
        self.ablation.no_md |= o.ablation.no_md;
        self.ablation.no_ce |= o.ablation.no_ce;
        self.ablation.no_rec |= o.ablation.no_rec;
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            net: self.net.clone(),
            dr: self.dr.clone(),
            md: self.md.clone(),
            val_fraction: self.val_fraction,
            probe: self.probe,
        }
    }

    pub fn domain_ids(&self) -> Vec<String> {
        match &self.data {
            DataConfig::Synthetic(s) => (0..s.num_domains).map(|d| s.domain_id(d)).collect(),
            DataConfig::Directories(dirs) => dirs.iter().map(|d| d.domain_id.clone()).collect(),
        }
    }

    /// The single spec used by train-dr, train-md, eval and export-features.
    pub fn spec(&self) -> Result<ProtocolSpec> {
        let ids = self.domain_ids();
        let sel = &self.protocol;
        let test = match &sel.test_domain {
            Some(t) => t.clone(),
            None => ids.last().cloned().ok_or_else(|| Error::config("data", "no domains"))?,
        };
        let train = match &sel.train_domains {
            Some(t) => t.clone(),
            None => {
                let others = ids.iter().filter(|i| **i != test).cloned();
                if sel.protocol == Protocol::III {
                    others.take(1).collect()
                } else {
                    others.collect()
                }
            }
        };
        let spec = ProtocolSpec {
            protocol: sel.protocol,
            train_domains: train,
            test_domain: test,
        };
        spec.validate()?;
        for id in spec.train_domains.iter().chain([&spec.test_domain]) {
            if !ids.contains(id) {
                return Err(Error::config("protocol", format!("unknown domain `{id}`")));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        match &self.data {
            DataConfig::Synthetic(s) => {
                s.validate()?;
                if s.resolution != self.net.resolution {
                    return Err(Error::config(
                        "data.synthetic.resolution",
                        format!("must equal net.resolution ({})", self.net.resolution),
                    ));
                }
            }
            DataConfig::Directories(dirs) => {
                if dirs.len() < 2 {
                    return Err(Error::config("data.directories", "need at least two domains"));
                }
                let mut ids = self.domain_ids();
                ids.sort();
                ids.dedup();
                if ids.len() != dirs.len() {
                    return Err(Error::config("data.directories", "domain ids must be unique"));
                }
            }
        }
        let p = self.pipeline();
        p.validate(&self.ablation)?;
        self.spec()?;
        Ok(())
    }

    /// Content hash of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(content_hash(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    TrainDr,
    TrainMd,
    Eval,
    ProtocolRun,
    ExportFeatures,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Synth,
        Command::TrainDr,
        Command::TrainMd,
        Command::Eval,
        Command::ProtocolRun,
        Command::ExportFeatures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainDr => "train-dr",
            Command::TrainMd => "train-md",
            Command::Eval => "eval",
            Command::ProtocolRun => "protocol-run",
            Command::ExportFeatures => "export-features",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config("command", format!("unknown command `{s}`")))
    }
}

/// Provenance of one command run. `inputs` and `outputs` map paths
/// relative to `output_dir` (or `dataset/<id>`) to content hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// What eval writes to `eval/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub spec: ProtocolSpec,
    pub method: String,
    pub seed: u64,
    pub report: EvalReport,
}

pub fn manifest_path(output_dir: &Path, cmd: Command) -> PathBuf {
    output_dir.join("manifests").join(format!("{cmd}.json"))
}

/// Hash of a dataset's decoded contents, independent of its storage.
pub fn dataset_hash(d: &DomainDataset) -> String {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(d.domain_id.as_bytes());
    for s in &d.samples {
        for v in s.image.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.push(s.pad_label.as_target());
        bytes.extend_from_slice(&(s.subject_id as u64).to_le_bytes());
    }
    content_hash(&bytes)
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<DomainDataset>> {
    match &cfg.data {
        DataConfig::Synthetic(s) => generate_synthetic_domains(s),
        DataConfig::Directories(dirs) => dirs
            .iter()
            .map(|d| load_directory_dataset(&d.path, &d.domain_id, cfg.net.resolution).map_err(|e| e.in_domain(&d.domain_id)))
            .collect(),
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.cfg.output_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn datasets(&mut self) -> Result<Vec<DomainDataset>> {
        let ds = load_datasets(self.cfg)?;
        for d in &ds {
            self.inputs.insert(format!("dataset/{}", d.domain_id), dataset_hash(d));
        }
        Ok(ds)
    }

    fn record_output(&mut self, p: &Path) -> Result<()> {
        let h = file_hash(p)?;
        self.outputs.insert(self.rel(p), h);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        atomic_write(&p, bytes)?;
        self.outputs.insert(rel.to_string(), content_hash(bytes));
        Ok(())
    }

    /// Checks `rel` exists, records its hash as an input, returns its path.
    fn require(&mut self, rel: &str, hint: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(Error::MissingArtifact {
                path: p,
                hint: hint.into(),
            });
        }
        self.inputs.insert(rel.to_string(), file_hash(&p)?);
        Ok(p)
    }

    fn finish(self, cmd: Command) -> Result<RunManifest> {
        let m = RunManifest {
            command: cmd.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.cfg.hash()?,
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        atomic_write(&manifest_path(&self.cfg.output_dir, cmd), &bytes)?;
        Ok(m)
    }
}

fn stage1_rel(domain: &str, role: Role) -> String {
    format!("stage1/{domain}/{role}.ckpt")
}

fn stage2_rel(domain: &str, role: Role) -> String {
    format!("stage2/{domain}/{role}.ckpt")
}

const FINAL_REL: &str = "stage2/final_classifier.ckpt";

/// Runs `cmd` with `cfg` and returns the manifest it wrote.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    log::info!("{cmd}: output {}", cfg.output_dir.display());
    let r = Run {
        cfg,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    match cmd {
        Command::Synth => cmd_synth(r),
        Command::TrainDr => cmd_train_dr(r),
        Command::TrainMd => cmd_train_md(r),
        Command::Eval => cmd_eval(r),
        Command::ProtocolRun => cmd_protocol_run(r),
        Command::ExportFeatures => cmd_export_features(r),
    }
}

fn cmd_synth(mut r: Run) -> Result<RunManifest> {
    for d in r.datasets()? {
        let dir = r.path(&format!("data/{}", d.domain_id));
        for p in write_directory_dataset(&d, &dir)? {
            r.record_output(&p)?;
        }
    }
    r.finish(Command::Synth)
}

/// The seeded pipeline config and source splits of the configured spec.
fn prepare(r: &mut Run) -> Result<(ProtocolSpec, PipelineConfig, ProtocolData)> {
    let spec = r.cfg.spec()?;
    let datasets = r.datasets()?;
    let pcfg = r.cfg.pipeline().seeded(r.cfg.seed);
    let data = protocol_data(&spec, &datasets, pcfg.val_fraction, r.cfg.seed)?;
    Ok((spec, pcfg, data))
}

fn cmd_train_dr(mut r: Run) -> Result<RunManifest> {
    let (_, pcfg, data) = prepare(&mut r)?;
    let trained = stage1(&data.train, &pcfg, &r.cfg.ablation, &NoAudit)?;
    let step = pcfg.dr.epochs as u64;
    let mut history = Vec::new();
    for d in &trained {
        let id = &d.pair.domain_id;
        for (role, e) in [(Role::PadGanD, &d.pair.e_pad), (Role::IdGanD, &d.pair.e_id)] {
            let p = r.path(&stage1_rel(id, role));
            checkpoint::save_encoder(&p, e, role, step)?;
            r.record_output(&p)?;
        }
        for (role, g) in [(Role::PadGanG, &d.pad_generator), (Role::IdGanG, &d.id_generator)] {
            if let Some(g) = g {
                let p = r.path(&stage1_rel(id, role));
                checkpoint::save_generator(&p, g, role, step)?;
                r.record_output(&p)?;
            }
        }
        history.extend(d.history.iter().cloned());
    }
    let p = r.path("stage1/history.jsonl");
    write_jsonl(&p, &history)?;
    r.record_output(&p)?;
    r.finish(Command::TrainDr)
}

fn load_stage1(r: &mut Run, domain: &str) -> Result<EncoderPair> {
    const HINT: &str = "run train-dr first";
    let (_, e_pad) = checkpoint::load_encoder(&r.require(&stage1_rel(domain, Role::PadGanD), HINT)?)?;
    let (_, e_id) = checkpoint::load_encoder(&r.require(&stage1_rel(domain, Role::IdGanD), HINT)?)?;
    Ok(EncoderPair {
        e_pad,
        e_id,
        domain_id: domain.to_string(),
    })
}

fn cmd_train_md(mut r: Run) -> Result<RunManifest> {
    let (spec, pcfg, data) = prepare(&mut r)?;
    if spec.protocol == Protocol::III {
        return Err(Error::config(
            "protocol",
            "protocol III scores with the stage-1 liveness head; run eval after train-dr",
        ));
    }
    let s1 = spec
        .train_domains
        .iter()
        .map(|d| {
            Ok(DomainDr {
                pair: load_stage1(&mut r, d)?,
                pad_generator: None,
                id_generator: None,
                history: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = stage2(s1, &data.train, &pcfg, &r.cfg.ablation, &NoAudit)?;
    let step = pcfg.md.epochs as u64;
    for (id, e) in model.domain_ids.iter().zip(&model.pad_encoders) {
        let p = r.path(&stage2_rel(id, Role::PadEncoder));
        checkpoint::save_encoder(&p, e, Role::PadEncoder, step)?;
        r.record_output(&p)?;
    }
    if let Some(s2) = &model.stage2 {
        for (i, id) in model.domain_ids.iter().enumerate() {
            let p = r.path(&stage2_rel(id, Role::DomainClassifier));
            checkpoint::save_linear(&p, &s2.classifiers[i], Role::DomainClassifier, step)?;
            r.record_output(&p)?;
            let p = r.path(&stage2_rel(id, Role::Decoder));
            checkpoint::save_decoder(&p, &s2.decoders[i], Role::Decoder, step)?;
            r.record_output(&p)?;
        }
        let p = r.path("stage2/history.jsonl");
        write_jsonl(&p, &s2.history)?;
        r.record_output(&p)?;
    }
    let p = r.path(FINAL_REL);
    checkpoint::save_linear(&p, &model.f_md, Role::FinalClassifier, step)?;
    r.record_output(&p)?;
    r.finish(Command::TrainMd)
}

/// Scoring model of the configured spec, from stage-2 artifacts (or the
/// stage-1 liveness discriminator under protocol III).
enum Scorer {
    Head(EncoderNet),
    Model(SourceModel),
}

impl Scorer {
    fn scores(&self, d: &DomainDataset) -> Result<ScoreSet> {
        match self {
            Scorer::Head(e) => head_scores(e, d),
            Scorer::Model(m) => m.scores(d),
        }
    }

    fn encoders(&self) -> Vec<&EncoderNet> {
        match self {
            Scorer::Head(e) => vec![e],
            Scorer::Model(m) => m.encoders(),
        }
    }
}

fn load_scorer(r: &mut Run, spec: &ProtocolSpec) -> Result<Scorer> {
    if spec.protocol == Protocol::III {
        let p = r.require(&stage1_rel(&spec.train_domains[0], Role::PadGanD), "run train-dr first")?;
        return Ok(Scorer::Head(checkpoint::load_encoder(&p)?.1));
    }
    const HINT: &str = "run train-md first";
    let pad_encoders = spec
        .train_domains
        .iter()
        .map(|d| Ok(checkpoint::load_encoder(&r.require(&stage2_rel(d, Role::PadEncoder), HINT)?)?.1))
        .collect::<Result<Vec<_>>>()?;
    let (_, f_md): (_, LinearClassifier) = checkpoint::load_linear(&r.require(FINAL_REL, HINT)?)?;
    Ok(Scorer::Model(SourceModel {
        domain_ids: spec.train_domains.clone(),
        pad_encoders,
        f_md,
        stage2: None,
    }))
}

fn cmd_eval(mut r: Run) -> Result<RunManifest> {
    let (spec, _, data) = prepare(&mut r)?;
    let scorer = load_scorer(&mut r, &spec)?;
    let val: Vec<ScoreSet> = data.val.iter().map(|v| scorer.scores(v)).collect::<Result<_>>()?;
    let report = report_at_validation_eer(&val, &scorer.scores(&data.test)?)?;
    let summary = EvalSummary {
        spec,
        method: r.cfg.ablation.label(),
        seed: r.cfg.seed,
        report,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    r.write("eval/report.json", &bytes)?;
    r.finish(Command::Eval)
}

fn cmd_protocol_run(mut r: Run) -> Result<RunManifest> {
    let datasets = r.datasets()?;
    let ids: Vec<String> = datasets.iter().map(|d| d.domain_id.clone()).collect();
    let specs = enumerate_protocols(&ids, r.cfg.protocol.protocol)?;
    let pcfg = r.cfg.pipeline();
    let mut outcomes = Vec::with_capacity(specs.len());
    for spec in &specs {
        log::info!("protocol-run: {}", spec.label());
        outcomes.push(run_protocol(spec, &datasets, &pcfg, &r.cfg.ablation, r.cfg.seed, true, &NoAudit)?);
    }
    let mut table = ResultsTable::new(specs.iter().map(|s| s.label()).collect());
    table.push(r.cfg.ablation.label(), outcomes.iter().map(|o| o.report.clone()).collect())?;
    r.write("protocol/results.csv", &table.to_csv()?)?;
    let mut bytes = serde_json::to_vec_pretty(&outcomes)?;
    bytes.push(b'\n');
    r.write("protocol/outcomes.json", &bytes)?;
    r.finish(Command::ProtocolRun)
}

fn cmd_export_features(mut r: Run) -> Result<RunManifest> {
    let spec = r.cfg.spec()?;
    let datasets = r.datasets()?;
    let scorer = load_scorer(&mut r, &spec)?;
    for d in &datasets {
        let p = r.path(&format!("features/{}.csv", d.domain_id));
        export_features_csv(&pad_features(&scorer.encoders(), d)?, &FeatureMeta::of_dataset(d), &p)?;
        r.record_output(&p)?;
    }
    r.finish(Command::ExportFeatures)
}
