// Tape ops are fallible methods named after arithmetic; `!(a <= b)` is the
// NaN-rejecting comparison; kernels index several buffers per loop variable.
#![allow(
    clippy::should_implement_trait,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop
)]

pub mod bissm;
pub mod cofe;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod lgp;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{PatchSet, Point3, PointCloud};
pub use model::{Model, ModelConfig};
pub use nn::{Bound, ParamId, ParamStore};
pub use tensor::{Tape, Tensor, TensorError, Var};
