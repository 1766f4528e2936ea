//! Post-training quantization: per-channel weight quantization, ternary
//! packing, power-of-two activation calibration, bias correction, the
//! fake-quant forward pass and the deployment image with its
//! integer-semantics reference.

mod calib;
mod fake;
mod image;
mod reference;
mod weights;

pub use calib::*;
pub use fake::*;
pub use image::*;
pub use reference::*;
pub use weights::*;

#[cfg(test)]
mod tests;
