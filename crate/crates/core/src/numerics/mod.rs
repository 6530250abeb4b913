//! Dense matrices, a differentiation tape, parameter storage and Adam.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use params::{BoundParams, ParamStore};
pub use tape::{
    concat_cols, concat_rows, sigmoid, softmax_rows, CustomOp, Gradients, Tape, Var,
    LAYER_NORM_EPS,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
