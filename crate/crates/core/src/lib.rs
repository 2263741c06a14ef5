//! Siamese single-object tracking with spatio-temporal template fusion and
//! discriminative search-feature augmentation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod da_module;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod model;
pub mod par;
pub mod rpn;
pub mod st_fusion;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
