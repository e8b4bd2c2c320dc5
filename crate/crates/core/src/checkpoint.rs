//! Checkpoint container shared by every model kind: a directory holding a
//! plain-text `manifest.toml` and a named-parameter `params.safetensors` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::Tensor;

use crate::diffusion::ScheduleDescriptor;
use crate::error::{CheckpointError, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `denoiser`, `restorer` or `probe`.
    pub kind: String,
    pub training_steps: u64,
    pub seed: u64,
    pub config: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleDescriptor>,
    /// Encoded rng substream positions, keyed by stream name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rng_state: BTreeMap<String, String>,
    /// Whether optimizer moments are stored alongside the parameters.
    #[serde(default)]
    pub has_optimizer_state: bool,
    /// Scalar facts recorded at save time, e.g. held-out accuracy.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointManifest {
    pub fn new<C: Serialize>(kind: &str, config: &C, training_steps: u64, seed: u64) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            training_steps,
            seed,
            config: to_table(config)?,
            schedule: None,
            rng_state: BTreeMap::new(),
            has_optimizer_state: false,
            metrics: BTreeMap::new(),
        })
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<C> {
        C::deserialize(toml::Value::Table(self.config.clone())).map_err(|e| {
            CheckpointError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("manifest config: {e}"),
            }
            .into()
        })
    }
}

pub fn to_table<C: Serialize>(config: &C) -> Result<toml::Table> {
    match toml::Value::try_from(config) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(other) => Err(Error::Config(format!("config serialized to non-table {other}"))),
        Err(e) => Err(Error::Config(format!("serializing config: {e}"))),
    }
}

/// Reports the first key on which `found` disagrees with `expected`.
pub fn compare_config<C: Serialize>(found: &toml::Table, expected: &C) -> Result<()> {
    let expected = to_table(expected)?;
    let mut keys: Vec<&String> = found.keys().chain(expected.keys()).collect();
    keys.sort();
    keys.dedup();
    for key in keys {
        let (f, e) = (found.get(key), expected.get(key));
        if f != e {
            let show = |v: Option<&toml::Value>| v.map_or("<absent>".to_string(), ToString::to_string);
            return Err(CheckpointError::ConfigMismatch {
                key: key.clone(),
                found: show(f),
                expected: show(e),
            }
            .into());
        }
    }
    Ok(())
}

pub fn save(dir: &Path, manifest: &CheckpointManifest, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = dir.join(PARAMS_FILE);
    let named: Vec<(&str, Tensor)> = tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t.detach().contiguous()))
        .collect();
    Tensor::write_safetensors(&named, &params)?;
    let text = toml::to_string(manifest).map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl LoadedCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into every variable of `vs`, checking names and shapes.
    pub fn apply_to(&self, vs: &VarStore) -> Result<()> {
        for (name, mut var) in crate::nn::sorted_variables(vs) {
            let src = self
                .tensor(&name)
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            if src.size() != var.size() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: src.size(),
                    expected: var.size(),
                }
                .into());
            }
            tch::no_grad(|| var.copy_(&src.to_kind(var.kind())));
        }
        Ok(())
    }
}

pub fn load(dir: &Path, expected_kind: &str) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CheckpointError::Missing(dir.to_path_buf()).into());
    }
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: dir.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| corrupt(e.to_string()))?;
    let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| corrupt(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| corrupt("manifest lacks format_version".into()))?;
    if version != i64::from(FORMAT_VERSION) {
        return Err(CheckpointError::VersionMismatch {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: CheckpointManifest =
        CheckpointManifest::deserialize(toml::Value::Table(raw)).map_err(|e| corrupt(e.to_string()))?;
    if manifest.kind != expected_kind {
        return Err(CheckpointError::KindMismatch {
            found: manifest.kind,
            expected: expected_kind.to_string(),
        }
        .into());
    }
    let tensors = Tensor::read_safetensors(dir.join(PARAMS_FILE)).map_err(|e| corrupt(e.to_string()))?;
    Ok(LoadedCheckpoint {
        path: dir.to_path_buf(),
        manifest,
        tensors,
    })
}
