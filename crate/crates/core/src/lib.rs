//! Single-image super-resolution training with a discriminative filter-bank loss.
//!
//! The library trains a small convolutional network to upscale images. On top of
//! the usual pixelwise squared error, the training loss carries an auxiliary term
//! that measures the residual through a bank of small filters. The bank itself is
//! not fixed: every few epochs it is redesigned to maximize the energy the current
//! residuals leave behind after filtering, subject to each filter having unit
//! energy, zero mean, and being orthogonal to the filters designed before it.
//! Training therefore alternates between two phases: design the bank against the
//! network's current mistakes, then train the network to shrink exactly those
//! mistakes.
//!
//! Module map:
//! - [`raster`]: image container, residuals, patch extraction, PNG I/O
//! - [`resample`]: bicubic downsampling and upsampling
//! - [`gram`]: full 2-D convolution and the quadratic-form matrices that score filters
//! - [`filterbank`]: the bank container, its constraint checker, and text serialization
//! - [`design`]: the constrained eigenvector solver that designs each filter
//! - [`homogenize`]: the lifted trace-form of the design problem, used for verification
//! - [`net`]: the network itself with hand-written forward/backward and Adam
//! - [`metrics`]: PSNR, SSIM, Laplacian high-frequency PSNR
//! - [`train`]: dataset split, the alternating training loop, run history

pub mod design;
pub mod error;
pub mod filterbank;
pub mod gram;
pub mod homogenize;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod resample;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
pub use filterbank::{check_feasibility, FeasibilityReport, FilterBank};
pub use gram::{CirculantMatrix, GramMatrix};
pub use net::{AdamState, ModelGrads, ModelParams};
pub use raster::{Image, Plane, Residual};
pub use train::{RunHistory, TrainingConfig};
