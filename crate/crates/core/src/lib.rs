pub mod config;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod harness;
pub mod learner;
pub mod model;
pub mod optim;
pub mod rng;
pub mod strategy;
pub mod stream;
pub mod tensor;
pub mod train;

pub use ensemble::{Architecture, EnsembleConfig, EnsembleModel};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use learner::{budget_match, Learner, LearnerConfig, Phase};
pub use model::Model;
pub use tensor::Tensor;
