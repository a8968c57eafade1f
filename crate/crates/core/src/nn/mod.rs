//! Minimal neural-network toolkit: tensors, layers with hand-written backward
//! passes, and the client model registry.

pub mod layers;
pub mod models;
pub mod tensor;

pub use layers::{BlockKind, ParamBlock};
pub use models::{
    build_model, load_checkpoint, load_model, save_checkpoint, Architecture, BackboneSpec, ClientModel,
    ForwardCache, ModelOutput,
};
pub use tensor::Tensor;
