//! One-step blind face deblurring.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode differentiation tape
//!   and a finite-difference gradient oracle.
//! - [`kernels`]: Matérn-5/2 Gaussian-process camera trajectories rasterized
//!   into centered, normalized motion kernels, plus linear-motion kernels.
//! - [`imaging`]: PNG I/O, the degradation model `y = x * k + n`, and PSNR.
//! - [`model`]: the residual multi-scale inception restoration network.
//! - [`losses`]: L2, total-variation and facial-feature losses and their
//!   weighted sum.
//! - [`training`]: RMSProp, learning-rate schedule, online pair synthesis and
//!   the `DDBLR1` checkpoint container.
//! - [`evalbench`]: PSNR sweeps, ablation comparison and inference timing.
//! - [`cli`]: the `deepdeblur` command-line front end.

pub mod cli;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use imaging::Image;
pub use kernels::{GpConfig, MotionKernel};
pub use model::{DeepDeblurNet, NetworkConfig};
pub use tensor::{Tape, Tensor, Var};
