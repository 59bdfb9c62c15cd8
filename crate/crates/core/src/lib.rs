//! Transferable adversarial audio against speaker-recognition models.
//!
//! The crate is organised bottom-up:
//!
//! - [`audio`]: 16-bit PCM waveforms and RIFF/WAVE I/O.
//! - [`dsp`]: windows, MDCT/iMDCT with their adjoints, framewise DCT, and the
//!   differentiable log-mel frontend.
//! - [`transform`]: the stochastic spectrum transformation
//!   `T(x) = iMDCT(MDCT(x + noise) * mask)` and its exact input adjoint.
//! - [`nets`]: two small embedding networks with hand-written backward passes.
//! - [`training`]: a synthetic multi-speaker corpus and a softmax trainer.
//! - [`objectives`]: verification and identification attack losses.
//! - [`attackers`]: FGSM, I-FGSM, MI-FGSM, NI-FGSM, ACG, spectrum-transformation
//!   attacks (single surrogate and ensemble).
//! - [`saliency`]: Layer-CAM maps and attention-shift measurement.
//! - [`metrics`]: EER, minDCF, FAR/TASR/IER, SNR/L2 and SNR-budget trial mixing.
//! - [`harness`]: surrogate-to-victim experiment campaigns.

pub mod attackers;
pub mod audio;
pub mod config;
pub mod dsp;
mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod saliency;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
