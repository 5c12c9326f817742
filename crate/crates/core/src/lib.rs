//! Branch-to-trunk networks for multi-resolution embedding learning.
//!
//! A shared trunk maps feature maps of any supported resolution to a unit
//! embedding; small resolution-specific branches map an `r x r` image
//! straight to the trunk's `r x r` feature map, so low-resolution inputs are
//! never up-sampled. The crate carries everything needed to build, train and
//! evaluate such models on a CPU:
//!
//! - [`graph`]: a tape-based reverse-mode autodiff over [`Tensor`]s
//! - [`resample`]: bilinear/nearest resizing and the interpolation-error bound
//! - [`model`]: trunk, branches, resolution-aware BN banks, parameter and FLOP
//!   accounting, and the checkpoint container
//! - [`losses`]: margin heads (NormFace, CosFace, ArcFace, CurricularFace),
//!   influence and branch-distillation losses
//! - [`train`]: trunk baselines and the branch training regimes
//! - [`select`]: branch selection from native image sizes
//! - [`eval`]: verification, TAR@FAR, TPIR@FPIR, AUC and relative gains
//! - [`data`]: synthetic identities, NetPBM IO, manifests and run configs
//! - [`experiments`]: end-to-end pipelines behind `btnet reproduce`

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod graph;
pub mod image;
mod kernels;
pub mod losses;
pub mod model;
pub mod real;
pub mod resample;
pub mod rng;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, Var};
pub use kernels::{conv_out_size, ConvGeom};
pub use real::Real;
pub use tensor::Tensor;
