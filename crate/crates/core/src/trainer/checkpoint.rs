//! Checkpoint layout:
//!
//! ```text
//! FSNIDS-CKPT v1\n
//! <manifest byte length>\n
//! <manifest, TOML>
//! <tensor blob, little-endian f32, offsets relative to blob start>
//! <SHA-256 of every preceding byte>
//! ```
//!
//! The vocabulary manifest is written next to the checkpoint as `<file>.vocab`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StageKind;
use crate::artifact::{read_required, write_atomic};
use crate::discretizer::{FeatureProfile, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Scalar};

pub const CHECKPOINT_MAGIC: &str = "FSNIDS-CKPT v1";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub kind: StageKind,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub profile: String,
    pub vocab_digest: String,
    pub optimizer: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
    /// Seeds by role, as decimal strings (TOML integers are signed 64-bit).
    #[serde(default)]
    pub seeds: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointManifest {
    pub fn new(config: &ModelConfig, vocab: &Vocabulary) -> Self {
        CheckpointManifest {
            format: CHECKPOINT_MAGIC.to_string(),
            profile: vocab.profile().id(),
            vocab_digest: vocab.digest(),
            optimizer: "adam; moments reset at every stage boundary".to_string(),
            config: config.clone(),
            stages: Vec::new(),
            seeds: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn record_seed(&mut self, role: &str, seed: u64) {
        self.seeds.insert(role.to_string(), seed.to_string());
    }

    pub fn seed(&self, role: &str) -> Option<u64> {
        self.seeds.get(role).and_then(|s| s.parse().ok())
    }

    /// Checks that a vocabulary is the one this checkpoint was trained with.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let profile = vocab.profile().id();
        if profile != self.profile {
            return Err(Error::Incompatible(format!(
                "checkpoint feature profile {} does not match vocabulary profile {profile}",
                self.profile
            )));
        }
        if vocab.digest() != self.vocab_digest {
            return Err(Error::Incompatible(format!(
                "vocabulary digest {} does not match checkpoint digest {}",
                vocab.digest(),
                self.vocab_digest
            )));
        }
        Ok(())
    }
}

pub fn vocab_manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".vocab");
    checkpoint.with_file_name(name)
}

fn encode<T: Scalar>(params: &ModelParams<T>, manifest: &CheckpointManifest) -> Result<Vec<u8>> {
    let mut manifest = manifest.clone();
    manifest.config = params.config.clone();
    manifest.tensors.clear();
    let mut blob = Vec::with_capacity(params.parameter_count() * 4);
    for t in params.tensors() {
        manifest.tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in t.data {
            blob.extend_from_slice(&v.to_f32().expect("finite parameter").to_le_bytes());
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest encoding: {e}")))?;
    let mut out = format!("{CHECKPOINT_MAGIC}\n{}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let corrupt = |m: &str| Error::Corruption(m.to_string());
    let header = format!("{CHECKPOINT_MAGIC}\n");
    if !bytes.starts_with(header.as_bytes()) {
        return Err(corrupt("missing FSNIDS-CKPT v1 header"));
    }
    if bytes.len() < header.len() + CHECKSUM_LEN {
        return Err(corrupt("file truncated"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt("checksum mismatch (file truncated or modified)"));
    }
    let rest = &body[header.len()..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("manifest length"))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("manifest length"))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(corrupt("manifest truncated"));
    }
    let text = std::str::from_utf8(&rest[..len]).map_err(|_| corrupt("manifest is not UTF-8"))?;
    let manifest: CheckpointManifest =
        toml::from_str(text).map_err(|e| Error::Corruption(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_MAGIC {
        return Err(Error::Incompatible(format!("unsupported checkpoint format {}", manifest.format)));
    }
    manifest.config.validate()?;
    let blob = &rest[len..];

    let mut params = ModelParams::<f32>::zeros(&manifest.config);
    let tensors = params.tensors_mut();
    if tensors.len() != manifest.tensors.len() {
        return Err(corrupt("tensor directory does not match the model config"));
    }
    let mut expected_end = 0usize;
    for (t, entry) in tensors.into_iter().zip(&manifest.tensors) {
        if t.name != entry.name || t.shape != entry.shape {
            return Err(Error::Corruption(format!(
                "tensor directory lists {} {:?}, config expects {} {:?}",
                entry.name, entry.shape, t.name, t.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + t.data.len() * 4;
        if end > blob.len() {
            return Err(Error::Corruption(format!("tensor {} runs past the blob", entry.name)));
        }
        for (v, chunk) in t.data.iter_mut().zip(blob[start..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        expected_end = expected_end.max(end);
    }
    if expected_end != blob.len() {
        return Err(corrupt("unexpected trailing tensor bytes"));
    }
    Ok((params, manifest))
}

/// Writes the checkpoint and its vocabulary manifest. Tensors are stored as
/// f32 whatever `T` is.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    manifest: &CheckpointManifest,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    manifest.check_vocabulary(vocab)?;
    if !params.all_finite() {
        return Err(Error::NumericalFault("refusing to save non-finite parameters".into()));
    }
    write_atomic(&vocab_manifest_path(path), vocab.manifest().as_bytes())?;
    write_atomic(path, &encode(params, manifest)?)
}

/// Loads a checkpoint with the vocabulary stored beside it. When `expected`
/// is given, it must match the checkpoint's profile and digest.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&Vocabulary>,
) -> Result<(ModelParams<f32>, CheckpointManifest, Vocabulary)> {
    let (params, manifest) = decode(&read_required(path)?)?;
    let vocab_path = vocab_manifest_path(path);
    let text = String::from_utf8(read_required(&vocab_path)?)
        .map_err(|_| Error::Corruption(format!("{} is not UTF-8", vocab_path.display())))?;
    let vocab = Vocabulary::from_manifest(&text)?;
    manifest.check_vocabulary(&vocab)?;
    if let Some(v) = expected {
        manifest.check_vocabulary(v)?;
    }
    FeatureProfile::parse_id(&manifest.profile)?;
    Ok((params, manifest, vocab))
}
