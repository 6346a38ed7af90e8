//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Graph`] records operations as they are evaluated (values are computed
//! immediately, builder-style) and replays the tape in reverse to accumulate
//! vector–Jacobian products. The primitive set is deliberately small —
//! matrix multiply, elementwise arithmetic, tanh/sigmoid/relu/sqrt, row
//! softmax, concatenation, reshape, row slicing, reduction, and a
//! straight-through quantizer — everything else (1-D convolutions, LSTM
//! cells, attention) is composed from these, so the finite-difference gate
//! on the primitives covers the whole network zoo.
//!
//! Node evaluation order is the creation order and parameters are bound in
//! name order, so forward values, gradients and optimizer updates are
//! bit-reproducible across runs.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_params, save_params, CheckpointError};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{Bound, Graph, GraphError, NodeId};
pub use params::{glorot_uniform, AdamConfig, ParamSet};
pub use tensor::Tensor;
