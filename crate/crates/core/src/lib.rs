//! Object-aware audio-visual sound source localisation: encoders, maps,
//! optimal transport, losses, caption guidance, data, metrics and the
//! training pipeline.

pub mod avmaps;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod losses;
pub mod nn;
pub mod ot;
pub mod pipeline;
pub mod selftest;
pub mod sim;

pub use error::{Error, Result};
