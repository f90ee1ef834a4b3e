//! Run configuration: JSON schema, `key.path=value` overrides and hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use slicegap_core::interp::UpsampleOptions;
use slicegap_core::metrics::EvalRegion;
use slicegap_core::sr::{GeneratorSpec, SrTrainConfig};
use slicegap_core::vae::{VaeArchSpec, VaeTrainConfig};

use crate::CliError;

pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub arch: VaeArchSpec,
    pub train: VaeTrainConfig,
    pub upsample: UpsampleOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrSection {
    pub generator: GeneratorSpec,
    pub train: SrTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub region: EvalRegion,
    pub max_val: f64,
    /// MS-SSIM scale count; `None` picks the largest that fits.
    pub ssim_levels: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            region: EvalRegion::Unobserved,
            max_val: 1.0,
            ssim_levels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Slice-spacing reduction factor.
    pub k: usize,
    pub vae: VaeSection,
    pub sr: SrSection,
    pub eval: EvalSection,
    /// Path to a dataset `manifest.json`.
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k: 4,
            vae: VaeSection::default(),
            sr: SrSection::default(),
            eval: EvalSection::default(),
            dataset: None,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), then applies `overrides` to
    /// the defaults-merged config.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(base).expect("config serializes");
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.k < 2 {
            return Err(CliError::Config(format!("k = {}: need k >= 2", self.k)));
        }
        self.vae.arch.validate()?;
        self.vae.train.validate()?;
        self.sr.generator.validate()?;
        self.sr.train.validate()?;
        if let Some(d) = &self.dataset {
            if !d.exists() {
                return Err(CliError::Config(format!(
                    "dataset manifest {} does not exist",
                    d.display()
                )));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("no dataset manifest configured".into()))
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON, leaving out
    /// the output directory so relocated reruns hash the same.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        let digest = Sha256::digest(
            serde_json::to_string(&v)
                .expect("value serializes")
                .as_bytes(),
        );
        hex::encode(&digest[..8])
    }

    /// Writes the effective config into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        crate::write_file(&dir.join(EFFECTIVE_CONFIG_FILE), text.as_bytes())
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when it
/// parses, otherwise taken as a string. Every key on the path must exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("`{}` is not an object", keys[..i].join(".")))
        })?;
        let slot = obj
            .get_mut(*key)
            .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one key")
}
