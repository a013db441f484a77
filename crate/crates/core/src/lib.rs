//! Image-guided diffusion on a glyph benchmark: a small conditional noise
//! model generates a spectrum of synthetic-to-real interpolations of hard
//! training samples, a fidelity filter prunes them, and curriculum runners
//! train classifiers over the guidance levels.

pub mod classifier;
pub mod curriculum;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod spectrum;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use schedule::{make_linear_schedule, start_step, GuidanceLevel, VarianceSchedule};
