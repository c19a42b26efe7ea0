//! # stemfill
//!
//! A desk-scale toolkit for inserting missing instrument stems into music
//! with conditional denoising diffusion models.
//!
//! The core idea: decompose a full mix `x` into a stem-subtracted context
//! `x_partial` and a missing stem, then train a denoiser to reconstruct `x`
//! conditioned on the clean `x_partial` (concatenated as an input channel)
//! and a text edit instruction ("Add rock-style drums"). The same recipe
//! runs in two domains:
//!
//! - **Spectrograms**: Gaussian DDPM over normalized log-mel magnitudes,
//!   with DDIM sampling and an SDEdit-style baseline for comparison.
//! - **Piano rolls**: binary (XOR-Bernoulli) diffusion over 3-channel
//!   drum/bass/guitar note grids parsed from Standard MIDI Files.
//!
//! Everything runs on CPU from scratch: WAV/SMF parsing, STFT/mel/Griffin-Lim
//! DSP, a small convolutional U-Net with hand-written backprop, AdamW
//! training, and a Fréchet-distance evaluation suite backed by in-repo toy
//! classifiers.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `stemfill` binary for the batch CLI
//! (`make-corpus`, `train`, `generate`, `baseline`, `evaluate`, `render`).

pub mod audio;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod instruct;
pub mod metrics;
pub mod nn;
pub mod pianoroll;
pub mod render;
pub mod tensorfile;


