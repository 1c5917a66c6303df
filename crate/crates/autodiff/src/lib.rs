//! Minimal dense-tensor engine: a define-by-run reverse-mode tape over `f64`
//! tensors, the handful of layer primitives the models need, Adam, Gumbel
//! noise, and a bit-exact checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, StepReport};
pub use checkpoint::{Checkpoint, Manifest};
pub use error::{Result, TensorError};
pub use gumbel::{gumbel_noise, gumbel_softmax, sample_gumbel, LOOKUP_TEMPERATURE};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
