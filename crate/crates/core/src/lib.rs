//! Taylor expansions of value functions for bilinear optimal control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dynamics;
pub mod error;
pub mod fokker_planck;
pub mod multilinear;
pub mod oracle;
pub mod lyapchain;
pub mod spectral;
pub mod study;
pub mod system;
pub mod valuefn;

pub use error::{Error, Result};
pub use multilinear::SymTensor;
pub use system::BilinearSystem;
