//! Conditional-GAN deblurring with a dark channel prior.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`optim`], [`gradcheck`]: a dense tensor type and a
//!   reverse-mode tape with the handful of ops the networks and losses need.
//!   [`suite`] holds the registered finite-difference cases.
//! * [`dark_channel`]: dark channel maps, the L2 dark channel loss and a
//!   sparsity diagnostic.
//! * [`networks`]: the encoder-decoder generator and the conditional
//!   discriminator, plus the `DGC1` checkpoint format.
//! * [`training`]: losses, the alternating D/G schedule and the training loop.
//! * [`data`] and [`imageio`]: paired datasets, synthetic motion blur, noise
//!   augmentation and PNG/PPM codecs.
//! * [`metrics`]: PSNR, SSIM and evaluation reports.

pub mod checkpoint;
pub mod config;
pub mod dark_channel;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod training;

mod conv;

pub use error::{Error, Result};
pub use tape::{Mode, Tape, Var};
pub use tensor::{Real, Tensor};
