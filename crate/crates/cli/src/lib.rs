//! Batch experiment driver: synthetic recovery curves, phase-transition
//! grids over (rank, sampling probability), and the image inpainting
//! pipeline, with deterministic outputs from `(config, seed)`.

pub mod config;
pub mod experiments;
pub mod image;
pub mod reshape;
