pub mod checkpoint;
pub mod cli;
pub mod datakit;
pub mod drnet;
pub mod error;
pub mod evalkit;
pub mod fsutil;
pub mod history;
pub mod linear;
pub mod mdnet;
pub mod nets;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
