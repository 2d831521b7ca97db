pub mod blocks;
pub mod cloud;
pub mod encoding;
pub mod error;
pub mod fpconv;
pub mod fptransformer;
pub mod harness;
pub mod network;
pub mod nn;
pub mod tensor;

pub use cloud::{NeighborIndex, PointCloud};
pub use error::{Error, Result};
pub use tensor::{grad_check, Rng, Tape, Tensor, Var};
