//! Core algorithms for background activation suppression (BAS) in weakly
//! supervised object localization.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation: a small CNN with hand-written backward passes, the activation
//! map constraint wiring and its four losses, top-k map fusion and box
//! extraction, the evaluation metrics, the mask-probe experiment, and the
//! image-space augmentation and synthetic-shape rasterization routines.
//!
//! File formats, the training loop and the CLI live in the `bas` crate.

#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod data;
pub mod bbox;
mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod optim;
pub mod probe;
mod scalar;
pub mod synth;
pub mod tensor;

pub use bbox::BBox;
pub use error::{CoreError, CoreResult};
pub use scalar::Scalar;
pub use tensor::{BinaryMask, Tensor3};
