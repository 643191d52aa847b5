//! Replay prompting: private and shared token buffers that are prepended
//! to each modality's sequence, refreshed after every layer and replayed
//! into the prompt rows of the next one.

mod buffers;
mod config;
mod forward;
mod init;
mod state;

pub use buffers::{
    compose_layer0_input, extract_layer_features, orthogonality_loss, replay_inject, update_private_buffer,
    update_shared_buffer, Block, BlockPositions, OrthoLoss, PrivateMapVars, Replay, SharedMapVars,
};
pub use config::{Components, NoiseType, PrivateMap, RepConfig, SharedMap, BETA_INIT, STATIC_INIT_STD};
pub use forward::{rep_forward, static_prompt_forward, RepOutput};
pub use init::{embedding_summary, init_private_buffer, init_shared_buffer, sample_noise};
pub use state::{BoundRep, PrivateMlp, RepState};
