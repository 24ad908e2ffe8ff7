//! Toy-scale differentiable editing network: view tokenization, text
//! injection at scheduled decoder depths with view-aware key/value gating,
//! and a residual displacement head, trained with Adam.

mod config;
mod net;
mod params;
mod train;

pub use config::{injection_schedule, ModelConfig, RunSettings, VIEW_HIDDEN};
pub use net::{
    backward, embed_instruction, encode_views, forward, predicted_edit, text_cross_attention,
    view_descriptor, view_weights, ForwardTrace, InstructionEmbedding, ModelInputs, ViewDescriptor,
};
pub use params::{load_checkpoint, save_checkpoint, InjectParams, LayerParams, ModelParams};
pub use train::{
    cosine_lr, evaluate_pair, gradcheck_params, gradcheck_params_with_control, train_loop,
    train_step, AdamState, ArrayCheck, EvalMetrics, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DEFAULT_LR,
};
