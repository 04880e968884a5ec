//! Differentiable kernels, parameter storage, gradient checks and the `AVW1`
//! checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use layers::Phase;
pub use params::{Group, Param, ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
