//! Spiking self-attention with binary positional encodings.

pub mod attention;
pub mod bitcodec;
pub mod error;
pub mod experiment;
pub mod lut;
pub mod model;
pub mod neuron;
pub mod tasks;
pub mod tensor;
pub mod verify;

pub use attention::{AttnMap, Grid2D, PositionalScheme, RelativeBias, SpikeTensor};
pub use bitcodec::GrayWord;
pub use error::{Error, Result};
pub use neuron::{LifParams, LifState, Surrogate};
pub use tensor::{BatchNormState, DiffTensor, ParamId, ParamStore, Tape, Var};
