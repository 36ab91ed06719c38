//! A compact reverse-mode automatic differentiation engine.
//!
//! Built for CPU training of small convolutional networks: convolutions lower
//! to `im2col` + GEMM, every op has a hand-written backward, and the whole
//! engine is generic over `f32` (training) and `f64` (gradient checks).
//!
//! ```
//! use corredit_nn::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum_all();
//! let grads = g.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0]);
//! ```

mod conv;
mod graph;
pub mod layers;
mod ops;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{init_uniform, Bound, ParamStore};
pub use scalar::{gemm, Layout, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
