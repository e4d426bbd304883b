//! Distillation-supervised convolutional low-rank adaptation (DSCLoRA) for
//! single-image super-resolution.
//!
//! The crate is organised around a small dense-tensor layer with reverse-mode
//! gradients ([`tensor`]), ConvLoRA adapters with exact merging ([`lora`]), a
//! SPAN-style network with parameter-free attention blocks ([`network`]), the
//! three-term distillation objective ([`distill`]), the two-stage fine-tuning
//! loop ([`train`]), and image I/O plus the PSNR/SSIM evaluation protocol
//! ([`data`], [`metrics`]). Checkpoints use a custom binary container
//! ([`checkpoint`]) and training runs are configured through a key=value file
//! ([`config`]).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Eager, GradTape, Ops, Scalar, Tensor, ValueId};
