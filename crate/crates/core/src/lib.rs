//! Attention distillation for multi-domain image-to-image translation GANs.
//!
//! The crate builds StarGAN-style teacher and student generators with a shared
//! discriminator, extracts gradient-based attention maps from named generator
//! layers by backpropagating the discriminator's domain-classification score,
//! and trains compressed student generators with an attention-distillation
//! loss (including the pseudo-attention variant for transferring between
//! different but spatially-related domain sets).
//!
//! Everything runs on the CPU over a small reverse-mode autodiff engine in
//! [`tensor`]; training, synthetic data generation, evaluation and rendering
//! are deterministic functions of their seeds.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod render;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
