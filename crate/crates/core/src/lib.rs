//! Desk-scale one-stage CT lesion detector: a residual backbone feeding a
//! feature pyramid with path-aggregation couplings, deformable
//! squeeze-and-excitation blocks on the final pyramid, and shared
//! RetinaNet-style class/box subnets.
//!
//! Everything runs on a small in-crate reverse-mode differentiator
//! ([`tensor`]), so every operator can be checked against finite differences.

pub mod anchors;
pub mod data;
pub mod dse;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod lesion;
pub mod network;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{PdseError, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Real, Tensor, Var};
