//! The experiment configuration tree: one JSON document, parsed with
//! path-aware errors and patched with dotted `a.b.c=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::missing::Scenario;
use crate::rep::{Components, NoiseType, RepConfig};
use crate::train::optim::OptimizerConfig;
use crate::train::tune::TrainRegime;

/// Backbone pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    /// Minimum held-out accuracy; below it pretraining fails.
    pub threshold: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                lr: 0.05,
                epochs: 10,
                ..OptimizerConfig::default()
            },
            threshold: 0.9,
        }
    }
}

/// One ablation cell: a named set of overrides on the base REP config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_type: Option<NoiseType>,
}

impl AblationCell {
    fn named(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            components: None,
            buffer_width: None,
            replay_depth: None,
            noise_intensity: None,
            noise_type: None,
        }
    }

    /// The base config with this cell's overrides applied.
    pub fn apply(&self, base: &RepConfig) -> RepConfig {
        let mut c = base.clone();
        if let Some(v) = self.components {
            c.components = v;
        }
        if let Some(v) = self.buffer_width {
            c.buffer_width = v;
        }
        if let Some(v) = self.replay_depth {
            c.replay_depth = v;
        }
        if let Some(v) = self.noise_intensity {
            c.noise_intensity = v;
        }
        if let Some(v) = self.noise_type {
            c.noise_type = v;
        }
        c
    }
}

/// Named grids mirroring the paper's ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// Baseline, +dynamic init, +dual buffers, +replay.
    Components,
    /// Full model, without private buffer, uniform and Laplace noise.
    BuffersAndNoise,
    /// Replay depth × buffer width, including depth 6 with width 36.
    DepthWidth,
    /// Noise intensity sweep including 0.2 and 0.3.
    NoiseIntensity,
    /// Buffer widths spanning the trainable-parameter budget.
    ParamBudget,
}

impl GridPreset {
    pub fn cells(self) -> Vec<AblationCell> {
        match self {
            GridPreset::Components => Components::ladder()
                .into_iter()
                .map(|(name, c)| AblationCell {
                    components: Some(c),
                    ..AblationCell::named(name)
                })
                .collect(),
            GridPreset::BuffersAndNoise => vec![
                AblationCell {
                    components: Some(Components::full()),
                    ..AblationCell::named("full")
                },
                AblationCell {
                    components: Some(Components {
                        private_buffer: false,
                        ..Components::full()
                    }),
                    ..AblationCell::named("no_private")
                },
                AblationCell {
                    noise_type: Some(NoiseType::Uniform),
                    ..AblationCell::named("uniform")
                },
                AblationCell {
                    noise_type: Some(NoiseType::Laplace),
                    ..AblationCell::named("laplace")
                },
            ],
            GridPreset::DepthWidth => {
                let mut cells = Vec::new();
                for d in [2, 4, 6] {
                    for l in [4, 12, 36] {
                        cells.push(AblationCell {
                            replay_depth: Some(d),
                            buffer_width: Some(l),
                            ..AblationCell::named(format!("d{d}_l{l}"))
                        });
                    }
                }
                cells
            }
            GridPreset::NoiseIntensity => [0.0, 0.1, 0.2, 0.3, 0.5]
                .into_iter()
                .map(|e| AblationCell {
                    noise_intensity: Some(e),
                    ..AblationCell::named(format!("eps{e}"))
                })
                .collect(),
            GridPreset::ParamBudget => [1, 2, 4, 8, 16]
                .into_iter()
                .map(|l| AblationCell {
                    buffer_width: Some(l),
                    ..AblationCell::named(format!("l{l}"))
                })
                .collect(),
        }
    }
}

/// Cells to run: a preset, explicit cells, or both (preset first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub preset: Option<GridPreset>,
    pub cells: Vec<AblationCell>,
}

impl AblationConfig {
    pub fn resolve_cells(&self) -> Result<Vec<AblationCell>> {
        let mut cells = self.preset.map(GridPreset::cells).unwrap_or_default();
        cells.extend(self.cells.iter().cloned());
        if cells.is_empty() {
            return Err(Error::config("ablation", "no cells: set `preset` or list `cells`"));
        }
        let mut ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config("ablation.cells", format!("duplicate cell id `{}`", w[0])));
        }
        Ok(cells)
    }
}

/// Everything a run needs. Every field has a default, and a resolved copy
/// with all defaults filled in is written next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub rep: RepConfig,
    /// Missing scenarios to train (when matched) and evaluate under.
    pub scenarios: Vec<Scenario>,
    pub train_regime: TrainRegime,
    /// Tuning optimizer.
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            rep: RepConfig::desk(),
            scenarios: vec![Scenario::Multi {
                modalities: vec![0, 1],
                rate: 0.7,
            }],
            train_regime: TrainRegime::Matched,
            optimizer: OptimizerConfig::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            ablation: AblationConfig::default(),
        }
    }
}

fn parse_value(value: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        // a missing field is reported at its parent; name the field itself
        let path = match missing_field(&message) {
            Some(field) if path == "." => field,
            Some(field) => format!("{path}.{field}"),
            None => path,
        };
        Error::Config { path, message }
    })
}

fn missing_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next().map(str::to_string)
}

impl ExperimentConfig {
    /// Parses a JSON document; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config(".", e.to_string()))?;
        parse_value(value)
    }

    /// Applies `path=value` overrides. The value is read as JSON when it
    /// parses, otherwise as a string.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut tree, path, value)?;
        }
        parse_value(tree)
    }

    /// Cross-field checks that run before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.backbone.validate()?;
        if self.task.feature_widths() != self.backbone.feature_widths {
            return Err(Error::config(
                "backbone.feature_widths",
                format!(
                    "task produces widths {:?}, backbone expects {:?}",
                    self.task.feature_widths(),
                    self.backbone.feature_widths
                ),
            ));
        }
        if self.task.seq_len != self.backbone.seq_len {
            return Err(Error::config("backbone.seq_len", "must equal task.seq_len"));
        }
        if self.task.n_classes != self.backbone.n_classes {
            return Err(Error::config("backbone.n_classes", "must equal task.n_classes"));
        }
        self.rep.validate()?;
        self.pretrain.optimizer.validate("pretrain.optimizer")?;
        self.optimizer.validate("optimizer")?;
        if self.scenarios.is_empty() {
            return Err(Error::config("scenarios", "at least one scenario is required"));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            s.validate(self.task.n_modalities()).map_err(|e| Error::config(format!("scenarios[{i}]"), e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Splits a dotted override `a.b=v` into its path and raw value.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::config(text, "override must look like `path.to.field=value`")),
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if !map.contains_key(*part) {
                    return Err(Error::config(path, format!("unknown field `{part}`")));
                }
                let slot = map.get_mut(*part).expect("checked");
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(path, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(path, format!("index {idx} out of range ({len} items)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(path, format!("`{part}` is not inside an object or array"))),
        };
    }
    Ok(())
}
