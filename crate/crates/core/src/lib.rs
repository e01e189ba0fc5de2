// Config validation uses negated comparisons so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algebra;
pub mod analysis;
pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod numerics;
pub mod presets;
pub mod solver;
pub mod training;

pub use numerics::{Dtype, Scalar, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub use model::{Model32, Model64};
