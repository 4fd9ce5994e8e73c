//! Question-answering sequence transduction on a small define-by-run
//! autodiff core: text pipeline, transformer and recurrent encoder–decoders,
//! training, greedy decoding and BLEU.
//!
//! Everything numeric is generic over [`tensor::Scalar`] (`f32` or `f64`);
//! the aliases below fix `f64`, the precision the gradient checks assume.

pub mod check;
pub mod decode;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Model = model::Model<f64>;
pub type Session = model::Session<f64>;
pub type Trainer = train::Trainer<f64>;
pub type Checkpoint = train::Checkpoint<f64>;
