//! LLaMA-style decoder-only transformer with a prunable SwiGLU MLP.

mod accounting;
mod checkpoint;
mod config;
mod forward;
mod weights;

pub use accounting::{count_macs, count_params, mac_breakdown, param_breakdown, MacBreakdown, ParamBreakdown};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{LayerShape, ModelConfig};
pub use forward::{
    check_tokens, forward, forward_on_tape, loss_and_grads, loss_forward, BoundLayer, BoundWeights, ForwardVars,
};
pub use weights::{expected_shapes, AttentionWeights, LayerWeights, MlpWeights, TransformerWeights};
