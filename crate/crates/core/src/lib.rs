//! Compressive-sensing image reconstruction by joint group and residual
//! sparse coding.
//!
//! The pipeline: [`sensing`] measures an image blockwise with a seeded
//! row-orthonormal Gaussian operator; [`gmm_prior`] learns a zero-mean
//! Gaussian mixture over mean-subtracted patch groups from clean images;
//! [`solver`] recovers the image by split Bregman iterations whose
//! sparsifying step ([`coder`]) codes each nonlocal patch group
//! ([`patch_groups`]) with an internal SVD dictionary and its residual with
//! the eigenbasis of the best-matching mixture component.

pub mod binio;
pub mod coder;
pub mod config;
pub mod cli;
pub mod error;
pub mod gmm_prior;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod patch_groups;
pub mod pgm;
pub mod sensing;
pub mod solver;

pub use error::{Error, Result};
pub use image::Image;
