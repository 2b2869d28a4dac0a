//! Differentiable operators, each recorded on a [`Tape`](crate::Tape).

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod reduce;
pub mod resample;
pub mod shape;

pub use conv::conv_out_extent;
pub use norm::DEFAULT_EPS;
pub use resample::upsample_taps;
