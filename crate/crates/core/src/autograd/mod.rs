//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op as it is evaluated. Parameters are pulled in by
//! name from a [`ParamStore`], and [`Graph::backward`] returns gradients keyed
//! by the same names. Ops that are easier to differentiate by hand (the
//! rasterizer, for one) plug in through [`Graph::custom`].

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, BlockReport, GradCheckConfig, GradCheckReport};
pub use graph::{positional_encoding, posenc_width, CustomBackward, Gradients, Graph, Var};
pub use params::{Init, ParamStore, PARAM_FORMAT_VERSION};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
