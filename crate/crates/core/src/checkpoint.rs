//! Checkpoint archives: a tar file holding `manifest.json` followed by one
//! raw little-endian `f32` blob per tensor under `tensors/<layer path>.f32`.
//! Entry headers carry fixed metadata so identical parameters always
//! produce identical bytes.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::nets::{
    restore_params, snapshot_params, DecoderNet, EncoderNet, GeneratorNet, LinearClassifier, NetConfig, Network, ParamSnapshot,
};

const FORMAT: &str = "mdpad-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    Encoder,
    Decoder,
    Linear,
}

/// What a checkpointed network is used for in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PadGanG,
    PadGanD,
    IdGanG,
    IdGanD,
    PadEncoder,
    DomainClassifier,
    Decoder,
    FinalClassifier,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::PadGanG,
        Role::PadGanD,
        Role::IdGanG,
        Role::IdGanD,
        Role::PadEncoder,
        Role::DomainClassifier,
        Role::Decoder,
        Role::FinalClassifier,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::PadGanG => "pad_gan_G",
            Role::PadGanD => "pad_gan_D",
            Role::IdGanG => "id_gan_G",
            Role::IdGanD => "id_gan_D",
            Role::PadEncoder => "pad_encoder",
            Role::DomainClassifier => "domain_classifier",
            Role::Decoder => "decoder",
            Role::FinalClassifier => "final_classifier",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Checkpoint(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub role: Role,
    pub kind: NetKind,
    pub step: u64,
    /// Architecture; absent for linear classifiers.
    pub config: Option<NetConfig>,
    /// Input width of a linear classifier.
    pub inputs: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut h = tar::Header::new_gnu();
    h.set_size(data.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    builder
        .append_data(&mut h, name, data)
        .map_err(|e| Error::io(format!("archive entry {name}"), e))
}

/// Serializes a network into archive bytes.
pub fn encode(
    net: &dyn Network,
    role: Role,
    kind: NetKind,
    step: u64,
    config: Option<&NetConfig>,
    inputs: Option<usize>,
) -> Result<Vec<u8>> {
    let snap = snapshot_params(net);
    let tensors: Vec<TensorEntry> = snap
        .tensors
        .iter()
        .map(|(name, (shape, _))| TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            file: format!("tensors/{name}.f32"),
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        role,
        kind,
        step,
        config: config.cloned(),
        inputs,
        tensors,
    };
    let mut b = tar::Builder::new(Vec::new());
    append(&mut b, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    for entry in &manifest.tensors {
        let (_, values) = &snap.tensors[&entry.name];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        append(&mut b, &entry.file, &bytes)?;
    }
    b.into_inner().map_err(|e| Error::io("finish archive", e))
}

/// Parses archive bytes into the manifest and a parameter snapshot.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamSnapshot)> {
    let mut archive = tar::Archive::new(bytes);
    let mut files = std::collections::BTreeMap::new();
    for entry in archive.entries().map_err(|e| Error::io("read archive", e))? {
        let mut entry = entry.map_err(|e| Error::io("read archive entry", e))?;
        let name = entry
            .path()
            .map_err(|e| Error::io("archive path", e))?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| Error::io(format!("archive entry {name}"), e))?;
        files.insert(name, data);
    }
    let manifest: Manifest = serde_json::from_slice(
        files
            .get("manifest.json")
            .ok_or_else(|| Error::Checkpoint("archive has no manifest.json".into()))?,
    )?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut snap = ParamSnapshot::default();
    for t in &manifest.tensors {
        let raw = files
            .get(&t.file)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {}", t.file)))?;
        let n: usize = t.shape.iter().product();
        if raw.len() != 4 * n {
            return Err(Error::Checkpoint(format!("{}: {} bytes for {} floats", t.file, raw.len(), n)));
        }
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        snap.tensors.insert(t.name.clone(), (t.shape.clone(), values));
    }
    Ok((manifest, snap))
}

pub fn read(path: &Path) -> Result<(Manifest, ParamSnapshot)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "checkpoint not found".into(),
            }
        } else {
            Error::io(format!("read {}", path.display()), e)
        }
    })?;
    decode(&bytes)
}

fn expect_kind(m: &Manifest, kind: NetKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Checkpoint(format!("expected {kind:?} checkpoint, found {:?}", m.kind)));
    }
    Ok(())
}

fn config_of(m: &Manifest) -> Result<NetConfig> {
    m.config
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest lacks network config".into()))
}

fn scratch_rng() -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

pub fn save_generator(path: &Path, net: &GeneratorNet, role: Role, step: u64) -> Result<()> {
    atomic_write(path, &encode(net, role, NetKind::Generator, step, Some(net.config()), None)?)
}

pub fn save_encoder(path: &Path, net: &EncoderNet, role: Role, step: u64) -> Result<()> {
    atomic_write(path, &encode(net, role, NetKind::Encoder, step, Some(net.config()), None)?)
}

pub fn save_decoder(path: &Path, net: &DecoderNet, role: Role, step: u64) -> Result<()> {
    atomic_write(path, &encode(net, role, NetKind::Decoder, step, Some(net.config()), None)?)
}

pub fn save_linear(path: &Path, net: &LinearClassifier, role: Role, step: u64) -> Result<()> {
    atomic_write(path, &encode(net, role, NetKind::Linear, step, None, Some(net.inputs()))?)
}

pub fn load_generator(path: &Path) -> Result<(Manifest, GeneratorNet)> {
    let (m, snap) = read(path)?;
    expect_kind(&m, NetKind::Generator)?;
    let mut net = GeneratorNet::new(&config_of(&m)?, &mut scratch_rng())?;
    restore_params(&mut net, &snap)?;
    Ok((m, net))
}

pub fn load_encoder(path: &Path) -> Result<(Manifest, EncoderNet)> {
    let (m, snap) = read(path)?;
    expect_kind(&m, NetKind::Encoder)?;
    let mut net = EncoderNet::new(&config_of(&m)?, &mut scratch_rng())?;
    restore_params(&mut net, &snap)?;
    Ok((m, net))
}

pub fn load_decoder(path: &Path) -> Result<(Manifest, DecoderNet)> {
    let (m, snap) = read(path)?;
    expect_kind(&m, NetKind::Decoder)?;
    let mut net = DecoderNet::new(&config_of(&m)?, &mut scratch_rng())?;
    restore_params(&mut net, &snap)?;
    Ok((m, net))
}

pub fn load_linear(path: &Path) -> Result<(Manifest, LinearClassifier)> {
    let (m, snap) = read(path)?;
    expect_kind(&m, NetKind::Linear)?;
    let inputs = m
        .inputs
        .ok_or_else(|| Error::Checkpoint("linear checkpoint lacks input width".into()))?;
    let mut net = LinearClassifier::new(inputs, 0.02, &mut scratch_rng());
    restore_params(&mut net, &snap)?;
    Ok((m, net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params_equal;

    #[test]
    fn encoder_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let cfg = NetConfig::desk().with_classes(5);
        let e = EncoderNet::new(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(9)).unwrap();
        save_encoder(&path, &e, Role::IdGanD, 42).unwrap();
        let (m, back) = load_encoder(&path).unwrap();
        assert_eq!(m.step, 42);
        assert_eq!(m.role, Role::IdGanD);
        assert_eq!(back.num_classes(), 5);
        assert!(params_equal(&snapshot_params(&e), &snapshot_params(&back)));
        let again = encode(&back, Role::IdGanD, NetKind::Encoder, 42, Some(&cfg), None).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), again);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        save_linear(
            &path,
            &LinearClassifier::from_weights(vec![1.0, 2.0], 0.0),
            Role::FinalClassifier,
            0,
        )
        .unwrap();
        assert!(load_encoder(&path).is_err());
        let (_, f) = load_linear(&path).unwrap();
        assert_eq!(f.weights(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = read(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact { .. }));
    }
}
