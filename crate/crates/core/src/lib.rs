//! Filter-atom subspace decomposition and parameter-efficient fine-tuning
//! at desk scale.
//!
//! Convolutional filter banks are factored over a small dictionary of
//! spatial filter atoms via sparse coding; linear and 1x1 layers are
//! factored as Kronecker sums. Fine-tuning then updates only the atoms
//! while the (frozen) mixing coefficients carry the pretrained channel
//! structure. The crate also hosts the parameter/FLOP accounting and a
//! small CNN training stack used to exercise the tuning schemes.

pub mod accounting;
pub mod atf;
pub mod atom_conv;
pub mod error;
pub mod finetune;
pub mod kron_linear;
pub mod manifest;
pub mod model;
pub mod overcomplete;
pub mod sparse;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Tensor};
