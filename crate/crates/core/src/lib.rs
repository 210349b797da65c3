pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod demo;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
