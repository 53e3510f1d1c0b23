//! Minimal CPU neural-network engine: tensors, layers with hand-written
//! backward passes, and AdamW.

pub mod layers;
pub mod param;
pub mod resize;
pub mod tensor;

pub use layers::{AvgPool2, Conv2d, GroupNorm, Linear, Relu};
pub use param::{AdamW, Param, Parameterized};
pub use tensor::Tensor;
