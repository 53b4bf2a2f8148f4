//! Censored mixture model for card-game risk taking: inflated negative
//! binomial choices, censoring from the game mechanics, and a finite mixture
//! over latent segments with covariate-shifted means.

pub mod config;
pub mod cli;
pub mod data;
pub mod design;
pub mod dist;
pub mod error;
pub mod estimate;
pub mod game;
pub mod inference;
pub mod likelihood;
pub mod optim;
pub mod params;
pub mod predict;
pub mod presets;
pub mod sim;

pub use error::{CmmError, Result};
