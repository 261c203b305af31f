//! Generative availability poisoning with a frozen random discriminator.
//!
//! A generator network learns, against a static randomly-initialized
//! classifier, to emit bounded per-sample perturbations that act as label
//! shortcuts. Training a victim on the perturbed data tanks its clean
//! validation accuracy. This crate implements the generator, the frozen
//! discriminator, the poison pipeline, and the victim-side evaluation
//! harness (final/peak accuracy, architecture transfer, cross-dataset
//! application, latent-space analysis).

pub mod analysis;
pub mod arch;
pub mod augment;
pub mod budget;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod hashing;
pub mod nn;
pub mod perturb;
pub mod poison;
pub mod report;
pub mod trainer;
pub mod victim;

pub use error::{Error, Result};
