//! FEMBA-Tiny bidirectional-Mamba EEG encoder at deployment level.
//!
//! The crate is `no_std` (with `alloc`) and pure: every operation is a
//! deterministic function of its inputs. IO, threading and file formats live
//! in the companion `femba` crate.
//!
//! Modules, bottom-up:
//!
//! * [`fixed`], [`lut`]: Q15 arithmetic, power-of-two requantization and
//!   interpolated lookup tables.
//! * [`signal`]: filtering, resampling, windowing, quartile normalization and
//!   the augmentations used for contrastive pre-training.
//! * [`model`]: float reference forward pass (tokenizer, Bi-Mamba blocks,
//!   pooling, linear head).
//! * [`quant`]: per-channel weight quantization, ternary packing,
//!   power-of-two activation calibration, bias correction, fake-quant and the
//!   integer-semantics reference.
//! * [`engine`]: the integer-only inference path.
//! * [`stream`]: MAC accounting and the double-buffered streaming simulator.
//! * [`objectives`]: masking and the SmoothL1 / InfoNCE / focal losses.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod fft;
pub mod fixed;
pub mod lut;
pub mod model;
pub mod objectives;
pub mod quant;
pub mod signal;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
