//! Edge-guided non-local fully convolutional network for salient object
//! detection, trained and evaluated on the CPU with a small reverse-mode
//! tensor engine.

pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{InitScheme, NetworkConfig};
pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use loss::LossWeights;
pub use model::Enfnet;
pub use params::ParamStore;
pub use tensor::{Shape, Tensor};
