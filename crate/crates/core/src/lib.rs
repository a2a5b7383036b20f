#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Conditional masked triplane reconstruction for 3D shape editing.

mod error;
pub mod dataset;
pub mod diagnostics;
pub mod edit;
pub mod eval;
pub mod extraction;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod masking;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod training;
pub mod volren;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
