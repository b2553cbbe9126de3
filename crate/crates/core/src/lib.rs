//! Wavelet flow matching for autoregressive PDE emulation.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`] and [`tensor_io`]: grid values, standardization and the binary tensor format.
//! * [`wavelet`]: orthonormal Daubechies filter banks and the periodic multi-scale 2-D DWT.
//! * [`flow`]: conditional flow matching in wavelet space (interpolants, losses, Euler sampling, rollout).
//! * [`velocitynet`]: the multi-scale U-Net velocity model with hand-written reverse-mode gradients.
//! * [`trainer`]: AdamW, the warmup + cosine schedule and the training loop.
//! * [`pdegen`]: toy heat and Gray-Scott trajectory generators and the on-disk dataset.
//! * [`metrics`]: VRMSE, fair CRPS, radial spectra and spectral coherence.
//! * [`profile`]: wall-clock and throughput bookkeeping for rollouts.

pub mod error;
pub mod field;
pub mod flow;
pub mod manifest;
pub mod metrics;
pub mod pdegen;
pub mod profile;
pub mod rng;
pub mod tensor_io;
pub mod trainer;
pub mod velocitynet;
pub mod wavelet;

pub use error::{Error, Result};
pub use field::{Field, ParamVector, Standardizer, Trajectory};
pub use wavelet::{FilterBank, Wavelet, WaveletPyramid};
