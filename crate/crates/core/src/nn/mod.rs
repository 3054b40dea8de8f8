//! Minimal dense/conv network engine with hand-derived backward passes.

mod activation;
mod arch;
mod layers;
mod model;
mod tensor;

pub use activation::{sigmoid, sigmoid_scalar, softmax};
pub(crate) use activation::softmax_in_place;
pub use arch::{Architecture, LayerSpec, TrunkPreset, FEATURE_DIM, NUM_AUS, NUM_EXPRESSIONS};
pub use model::{ForwardCache, ForwardOutput, Model, Param, ParamGroup, DEFAULT_INIT_SCALE};
pub use tensor::Tensor;
