//! Self-describing JSON checkpoint container.
//!
//! A checkpoint holds a format version, the configs needed to rebuild the
//! model, named tensors grouped into namespaces (`backbone`, `head`, `rep`)
//! and free-form records such as the pretraining report. Floats round-trip
//! exactly, so saving and reloading never changes a weight.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneWeights, Head};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::rep::{RepConfig, RepState};

pub const FORMAT_VERSION: u32 = 1;

pub const NS_BACKBONE: &str = "backbone";
pub const NS_HEAD: &str = "head";
pub const NS_REP: &str = "rep";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone_config: BackboneConfig,
    /// Whether the backbone encoders are frozen.
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rep_config: Option<RepConfig>,
    pub seed: u64,
    pub namespaces: BTreeMap<String, BTreeMap<String, Tensor>>,
    #[serde(default)]
    pub records: BTreeMap<String, serde_json::Value>,
}

fn collect(items: Vec<(String, &Tensor)>) -> BTreeMap<String, Tensor> {
    items.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

impl Checkpoint {
    /// Backbone-only checkpoint (encoders plus the pretrained head).
    pub fn from_backbone(weights: &BackboneWeights, seed: u64) -> Self {
        let mut namespaces = BTreeMap::new();
        namespaces.insert(NS_BACKBONE.to_string(), collect(weights.encoder_tensors()));
        namespaces.insert(NS_HEAD.to_string(), collect(weights.head.named_tensors()));
        Self {
            format_version: FORMAT_VERSION,
            backbone_config: weights.config.clone(),
            frozen: weights.frozen,
            rep_config: None,
            seed,
            namespaces,
            records: BTreeMap::new(),
        }
    }

    /// Full checkpoint after tuning: the frozen encoders, the tuned head
    /// and the tuned mechanism.
    pub fn from_tuned(weights: &BackboneWeights, rep: &RepState, head: &Head, seed: u64) -> Self {
        let mut ck = Self::from_backbone(weights, seed);
        ck.namespaces.insert(NS_HEAD.to_string(), collect(head.named_tensors()));
        ck.namespaces.insert(NS_REP.to_string(), collect(rep.named_tensors()));
        ck.rep_config = Some(rep.config.clone());
        ck
    }

    pub fn with_record(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.records.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    fn namespace(&self, name: &str) -> Result<&BTreeMap<String, Tensor>> {
        self.namespaces
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("namespace `{name}` is missing")))
    }

    /// Encoders plus the head stored in the `head` namespace.
    pub fn backbone(&self) -> Result<BackboneWeights> {
        let mut tensors = self.namespace(NS_BACKBONE)?.clone();
        tensors.extend(self.namespace(NS_HEAD)?.clone());
        BackboneWeights::from_named(self.backbone_config.clone(), &tensors, self.frozen)
    }

    pub fn head(&self) -> Result<Head> {
        Head::from_named(self.namespace(NS_HEAD)?)
    }

    pub fn rep(&self) -> Result<RepState> {
        let config = self
            .rep_config
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no rep config: this is a backbone-only checkpoint".into()))?;
        RepState::from_named(config, &self.backbone_config, self.namespace(NS_REP)?)
    }

    /// Scalars per namespace, counted from the stored tensors.
    pub fn param_counts(&self) -> ParamCounts {
        let count = |name: &str| {
            self.namespaces
                .get(name)
                .map_or(0, |ns| ns.values().map(Tensor::len).sum())
        };
        ParamCounts {
            backbone: count(NS_BACKBONE),
            head: count(NS_HEAD),
            rep: count(NS_REP),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ck: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Checkpoint(format!("at `{}`: {}", e.path(), e.inner())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Scalar counts per model part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    pub rep: usize,
}

impl ParamCounts {
    /// Counts implied by the configs, from closed-form sizes.
    pub fn expected(backbone: &BackboneConfig, rep: &RepConfig) -> Self {
        Self {
            backbone: backbone.encoder_param_count(),
            head: backbone.head_param_count(),
            rep: RepState::param_count_for(rep, backbone),
        }
    }

    pub fn trainable(&self) -> usize {
        self.head + self.rep
    }

    pub fn total(&self) -> usize {
        self.backbone + self.head + self.rep
    }

    /// `(rep + head) / total`, or 0 when nothing is trainable.
    pub fn trainable_fraction(&self) -> f64 {
        if self.trainable() == 0 {
            0.0
        } else {
            self.trainable() as f64 / self.total() as f64
        }
    }
}

/// Trainable fraction of a tuned checkpoint.
pub fn count_trainable_fraction(checkpoint: &Checkpoint) -> f64 {
    checkpoint.param_counts().trainable_fraction()
}
