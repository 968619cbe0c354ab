//! Biliary-tree MRI screening.
//!
//! The crate implements the full screening cascade: resize, grayscale,
//! sharpen, residual-CNN denoising, histogram equalization, complement,
//! dark-channel dehazing, complement, seeded Chan-Vese segmentation, blob and
//! texture feature extraction, six binary classifiers and a stratified
//! cross-validation harness. A synthetic phantom generator provides ground
//! truth, and an HTTP service exposes the pipeline to a review front end.

pub mod classify;
pub mod denoiser;
pub mod enhance;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod phantom;
pub mod pipeline;
pub mod raster;
pub mod segment;
pub mod service;

pub use error::{Error, Result};
