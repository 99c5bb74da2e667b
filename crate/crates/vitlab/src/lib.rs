//! Desk-scale Vision Transformer laboratory.
//!
//! A small, dependency-light stack for studying LayerNorm placement in
//! ViTs: a deterministic f32/f64 tensor engine with reverse-mode autodiff,
//! every stem and block normalization strategy under study, IDX/CIFAR-10
//! readers, an Adam + cosine-schedule training loop, and a CLI for sweeps
//! and instrumentation.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod norm;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;
