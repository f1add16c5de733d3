//! Audio-visual speech enhancement with a deep complex U-Net and conformer
//! fusion, built from first principles on the CPU.
//!
//! The pipeline: a convolutional STFT produces one-sided complex spectra; a
//! five-block complex encoder extracts features; per-frame visual embeddings
//! are temporally upsampled and fused with the real part of the latent
//! through a conformer stack; a five-block complex decoder with U-Net skip
//! connections estimates a complex ratio mask; masking plus inverse STFT
//! restores the enhanced waveform. Training minimizes negative SI-SNR.
//!
//! Every differentiable kernel ships with a hand-derived backward pass and a
//! finite-difference harness ([`gradcheck`]) that verifies all of them.

pub mod complex_nn;
pub mod conformer;
pub mod data;
pub mod dsp_stft;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod train_eval;
pub mod visual_frontend;
pub mod wav;

mod realconv;

pub use error::{DcucError, Result};
pub use tensor::{ComplexTensor, Tensor};
