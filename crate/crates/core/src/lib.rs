//! Cross-U transformer text-to-image diffusion at desk scale.
//!
//! Modules follow the data path: [`datapipe`] turns images into square crops
//! paired with position-map slices, [`textcond`] encodes captions,
//! [`backbone`] predicts flow-matching velocities with optional token
//! [`routing`], and [`flow`] holds the objective and the ODE sampler.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod routing;
pub mod seed;
pub mod textcond;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
