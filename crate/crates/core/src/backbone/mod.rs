//! A small per-modality transformer encoder with late fusion, standing in
//! for a large pretrained multimodal model.

mod config;
mod forward;
mod pretrain;
mod weights;

pub use config::BackboneConfig;
pub use forward::{embed_batch, embed_modality, encode_plain, encoder_layer_forward, fuse_and_classify, plain_logits};
pub use pretrain::{plain_accuracy, plain_predictions, pretrain_backbone, PretrainReport};
pub use weights::{
    BackboneWeights, BoundBackbone, BoundEncoder, BoundHead, BoundLayer, EncoderLayer, Head, ModalityEncoder,
};
