pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod io;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pos_embed;
pub mod radar;
pub mod sim;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use head::{Detection, GtBox};
pub use model::{Detector, ModelConfig};
pub use sim::Scene;
pub use tensor::{grad_check, Gradients, Tape, Tensor, Var};
