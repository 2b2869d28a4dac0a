//! Reverse feature pyramid (RevFP) and cross-scale shift network (CSN)
//! detection neck, built on a small `f64` reverse-mode autodiff tape.

pub mod config;
pub mod count;
pub mod csn;
pub mod error;
pub mod fixtures;
pub mod fpn;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod rcnet;
pub mod revfp;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use config::NeckConfig;
pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use pyramid::{FeaturePyramid, Pyramid};
pub use rcnet::{InitMode, Model};
pub use tape::{NodeInfo, Tape, Var};
pub use tensor::Tensor;
