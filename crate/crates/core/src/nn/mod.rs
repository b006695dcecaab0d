pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod gcn;
pub mod model;
pub mod tensor;

pub use model::{AdamConfig, Gradients, ModelConfig, ModelState, ParamGroup, Params};
