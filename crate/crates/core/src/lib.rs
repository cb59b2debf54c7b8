#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod nn;
pub mod pointlora;
pub mod real;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
