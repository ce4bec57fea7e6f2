//! CNN embedding, GRU encoder, residual multi-head attention and joint
//! prediction heads.

mod checkpoint;
mod config;
mod logits;
mod network;
mod params;

pub use checkpoint::{read_btmd, write_btmd, BTMD_MAGIC, BTMD_VERSION};
pub use config::{parse_switch, EmbedPool, ModelConfig, CNN_LAYERS, SPATIAL_MULTIPLE};
pub use logits::{argmax, LogitsBlock};
pub use network::{
    assemble_batch, cnn_embed, encode_sequence, gru_step, logits_blocks, mha_residual, pad_frame, predict_logits,
    BoundParams, CnnVars, ForwardPass, GruVars, HeadVars, MhaVars,
};
pub use params::{count_params, ModelParams};
