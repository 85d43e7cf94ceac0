#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod encoding;
pub mod error;
pub mod glm;
pub mod hrf_basis;
pub mod lbfgs;
pub mod noise;
pub mod pipeline;
pub mod rank_one;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
