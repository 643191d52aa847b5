use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the frozen multimodal encoder.
///
/// Each modality gets its own stack of `n_layers` pre-norm transformer
/// layers; the stacks only meet at the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Raw feature width of each modality; its length is the modality count.
    pub feature_widths: Vec<usize>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Content tokens per modality.
    pub seq_len: usize,
    pub n_classes: usize,
    /// Hidden width of each feed-forward block.
    pub ffn_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_widths: vec![16, 16],
            d_model: 32,
            n_layers: 8,
            n_heads: 4,
            seq_len: 8,
            n_classes: 4,
            ffn_hidden: 256,
        }
    }
}

impl BackboneConfig {
    pub fn n_modalities(&self) -> usize {
        self.feature_widths.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_modalities();
        if !(2..=3).contains(&k) {
            return Err(Error::config(
                "backbone.feature_widths",
                format!("expected 2 or 3 modalities, got {k}"),
            ));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("ffn_hidden", self.ffn_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("backbone.{name}"), "must be positive"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config("backbone.n_classes", "need at least two classes"));
        }
        if self.feature_widths.contains(&0) {
            return Err(Error::config("backbone.feature_widths", "widths must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "backbone.n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn check_modality(&self, modality: usize) -> Result<()> {
        if modality < self.n_modalities() {
            Ok(())
        } else {
            Err(Error::UnknownModality {
                index: modality,
                count: self.n_modalities(),
            })
        }
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.n_layers {
            Ok(())
        } else {
            Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            })
        }
    }

    /// Parameters in the encoder stacks, excluding the classification head.
    pub fn encoder_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.ffn_hidden;
        self.feature_widths
            .iter()
            .map(|w| w * d + self.seq_len * d + self.n_layers * per_layer)
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.n_modalities() * self.d_model * self.n_classes + self.n_classes
    }
}
