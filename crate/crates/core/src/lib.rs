//! Non-local recurrent neural memory (NRNM) on an LSTM backbone.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autograd`]: dense tensors and reverse-mode gradients;
//! * [`lstm`], [`baselines`]: recurrent backbones;
//! * [`memory`]: the blockwise self-attention memory cell;
//! * [`model`]: the sequence classifier and its loss;
//! * [`train`]: optimizers and the training loop;
//! * [`tasks`]: synthetic long-range tasks and external data loaders;
//! * [`harness`]: run configuration, sweeps, gradient checks, trace export.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lstm;
pub mod model;
pub mod memory;
pub mod params;
pub mod tasks;
pub mod train;
pub mod tensor;

pub use autograd::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelKind, Mode, SequenceBatch, SequenceModel};
pub use memory::NrnmConfig;
pub use params::{Param, ParamId, ParamSet};
pub use tensor::{Precision, Real, Tensor};
