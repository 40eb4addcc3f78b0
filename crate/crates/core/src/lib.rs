//! Probabilistic-embedding variants of the Barlow Twins and VICReg
//! self-supervised objectives, with the tooling to train small models and
//! evaluate them: linear probes, out-of-distribution detectors and
//! neural mutual-information estimates.

pub mod autodiff;
pub mod batchstats;
pub mod config;
pub mod data;
pub mod error;
pub mod evalprobe;
pub mod gaussdist;
pub mod mi;
pub mod models;
pub mod objectives;
pub mod ood;
pub mod optim;
pub mod params;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
