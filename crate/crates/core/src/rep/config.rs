use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// Distribution of the unit-variance perturbation added to the private
/// buffer seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    #[default]
    Gaussian,
    Uniform,
    Laplace,
}

impl NoiseType {
    pub const ALL: [NoiseType; 3] = [NoiseType::Gaussian, NoiseType::Uniform, NoiseType::Laplace];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Gaussian => "gaussian",
            NoiseType::Uniform => "uniform",
            NoiseType::Laplace => "laplace",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(NoiseType::Gaussian),
            "uniform" => Ok(NoiseType::Uniform),
            "laplace" => Ok(NoiseType::Laplace),
            other => Err(Error::config(
                "rep.noise_type",
                format!("unknown noise type `{other}` (expected gaussian, uniform or laplace)"),
            )),
        }
    }
}

/// The private-buffer map `G_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrivateMap {
    /// Linear, GELU, linear.
    #[default]
    Mlp,
    /// `G_m(Z) = Z`; no parameters.
    Identity,
}

/// The shared-buffer map `H` over the concatenated private buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharedMap {
    /// `GELU(C · W)`.
    #[default]
    Mlp,
    /// Average of the modality blocks of `C`; no parameters.
    Mean,
}

/// Which mechanisms are switched on. Each flag layers one mechanism on top
/// of the previous ones, so the four ablation rows are
/// `(false, false, false)`, `(true, false, false)`, `(true, true, false)`
/// and `(true, true, true)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// Seed private buffers from perturbed pretrained embeddings and the
    /// shared buffer from a normalized Gaussian; otherwise small random init.
    pub dynamic_init: bool,
    /// Shared buffer, per-layer buffer updates and the orthogonality loss.
    pub dual_buffers: bool,
    /// Learnable replay weights; when off they are pinned to zero.
    pub replay: bool,
    /// Keep the private block. Turning it off gives the "without private
    /// buffer" variant, where the shared update reads the shared-block
    /// features of every modality instead.
    pub private_buffer: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::full()
    }
}

impl Components {
    pub fn baseline() -> Self {
        Self {
            dynamic_init: false,
            dual_buffers: false,
            replay: false,
            private_buffer: true,
        }
    }

    pub fn full() -> Self {
        Self {
            dynamic_init: true,
            dual_buffers: true,
            replay: true,
            private_buffer: true,
        }
    }

    /// The cumulative ablation ladder: baseline, +dynamic init, +dual
    /// buffers, +replay.
    pub fn ladder() -> [(&'static str, Components); 4] {
        let base = Self::baseline();
        let dyn_init = Components {
            dynamic_init: true,
            ..base
        };
        let dual = Components {
            dual_buffers: true,
            ..dyn_init
        };
        [
            ("baseline", base),
            ("dynamic_init", dyn_init),
            ("dual_buffers", dual),
            ("full", Self::full()),
        ]
    }
}

/// Hyper-parameters of the replay-prompting mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepConfig {
    /// Tokens per buffer (`l`).
    pub buffer_width: usize,
    /// Deepest layer that receives replay (`d`).
    pub replay_depth: usize,
    /// Perturbation scale `ε_n` of the private-buffer init.
    pub noise_intensity: f64,
    pub noise_type: NoiseType,
    /// Weight `λ` of the orthogonality loss.
    pub ortho_weight: f64,
    /// Sum the orthogonality loss over every replayed layer instead of
    /// evaluating it at depth `d` only.
    pub ortho_all_layers: bool,
    /// Learn the projections `Θ_m`; when off they stay at identity.
    pub theta_learnable: bool,
    /// Calibration samples averaged into the private-buffer seed.
    pub calibration_samples: usize,
    pub components: Components,
    pub private_map: PrivateMap,
    pub shared_map: SharedMap,
}

impl Default for RepConfig {
    fn default() -> Self {
        Self {
            buffer_width: 36,
            replay_depth: 6,
            noise_intensity: 0.2,
            noise_type: NoiseType::Gaussian,
            ortho_weight: 0.1,
            ortho_all_layers: false,
            theta_learnable: true,
            calibration_samples: 64,
            components: Components::full(),
            private_map: PrivateMap::Mlp,
            shared_map: SharedMap::Mlp,
        }
    }
}

/// Standard deviation of the random (non-dynamic) buffer init.
pub const STATIC_INIT_STD: f64 = 0.02;

/// Initial value of both replay weights.
pub const BETA_INIT: f64 = 0.1;

impl RepConfig {
    /// Desk-scale defaults: the paper's values except a buffer width of 4
    /// tokens, which keeps the trainable fraction of the small backbone
    /// under 2%.
    pub fn desk() -> Self {
        Self {
            buffer_width: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_width == 0 {
            return Err(Error::config("rep.buffer_width", "must be at least 1"));
        }
        if self.replay_depth == 0 {
            return Err(Error::config("rep.replay_depth", "must be at least 1"));
        }
        if !(self.noise_intensity >= 0.0) || !self.noise_intensity.is_finite() {
            return Err(Error::config("rep.noise_intensity", "must be finite and >= 0"));
        }
        if !(self.ortho_weight >= 0.0) || !self.ortho_weight.is_finite() {
            return Err(Error::config("rep.ortho_weight", "must be finite and >= 0"));
        }
        if self.calibration_samples == 0 {
            return Err(Error::config("rep.calibration_samples", "must be at least 1"));
        }
        let c = self.components;
        if c.replay && !c.dual_buffers {
            return Err(Error::config(
                "rep.components.replay",
                "replay needs dual_buffers (replayed buffers are the updated ones)",
            ));
        }
        if !c.private_buffer && !c.dual_buffers {
            return Err(Error::config(
                "rep.components.private_buffer",
                "dropping the private buffer leaves no buffer unless dual_buffers is on",
            ));
        }
        Ok(())
    }

    /// Checks the config against a backbone.
    pub fn check_backbone(&self, backbone: &BackboneConfig) -> Result<()> {
        self.validate()?;
        if self.replay_depth > backbone.n_layers {
            return Err(Error::Compatibility(format!(
                "replay depth {} exceeds the backbone's {} layers",
                self.replay_depth, backbone.n_layers
            )));
        }
        Ok(())
    }

    /// Hidden width of each `G_m`.
    pub fn private_hidden(d_model: usize) -> usize {
        (d_model / 4).max(1)
    }

    /// Whether the buffers are refreshed layer by layer.
    pub fn updates_enabled(&self) -> bool {
        self.components.dual_buffers
    }

    pub fn has_shared(&self) -> bool {
        self.components.dual_buffers
    }

    pub fn has_private(&self) -> bool {
        self.components.private_buffer
    }

    /// Tokens placed in front of the content block.
    pub fn prefix_len(&self) -> usize {
        self.buffer_width * (self.has_shared() as usize + self.has_private() as usize)
    }
}
