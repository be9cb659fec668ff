//! Two-stage conditional video generation at desk scale.
//!
//! Stage 1 is a 3D VQ-GAN whose encoder and decoder wrap a motion
//! transformer built on prototype-based trajectory attention. Stage 2 is a
//! conditional autoregressive prior over the flattened latent codes, trained
//! with cross entropy plus perceptual and reconstruction losses routed
//! through a Gumbel-softmax straight-through path.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prior;
pub mod quantize;
pub mod tensor;
pub mod vqgan;

pub use error::{Error, Result};
pub use tensor::{Conv3dGeometry, DType, Float, Tensor};
