//! Minimal differentiable computation core.
//!
//! Values are `f64` rank-2 tensors. A [`Tape`] records primitive operations
//! as they run and replays them in reverse to produce gradients; parameters
//! live in a [`ParamStore`] that also carries Adam state. [`Dense`] and
//! [`Lstm`] are the only layers the sequence models need.

pub mod checkpoint;
pub mod error;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelFile, ParamMeta};
pub use error::{Result, TensorError};
pub use layers::{xavier_uniform, Dense, Lstm};
pub use optim::{AdamConfig, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};
