//! Laboratory for single-example imitation of image-to-image models.
//!
//! A black-box "target" model is observed through one (or a few) input-output
//! image pairs; a "student" network is trained to replicate its functionality
//! by minimizing the L2 distance between the student's prediction and the
//! observed output. The crate provides everything that study needs end to end:
//!
//! * [`tensor`] — a dense f64 NCHW tensor engine with reverse-mode
//!   differentiation and an Adam optimizer,
//! * [`models`] — plain convolutional stacks, encoder-decoder U-Nets and
//!   single-layer linear convolutions, with receptive-field arithmetic and
//!   checkpoint IO,
//! * [`distill`] — the imitation trainer (and its train-from-scratch twin),
//! * [`analysis`] — PSNR, 8-bit quantization, effective-receptive-field
//!   probing, and example-image statistics,
//! * [`defenses`] — visible watermarking and JPEG-style quantization of
//!   target outputs,
//! * [`theory`] — numerical verification of the linear identifiability
//!   dichotomy and a polynomial imitation demo.
//!
//! Everything is deterministic: the same seeds and the same call sequence
//! produce bit-identical results.

pub mod analysis;
pub mod defenses;
pub mod distill;
pub mod error;
pub mod models;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
