//! A small laboratory for dual-model preference finetuning of diffusion and
//! flow models on low-dimensional toy tasks.
//!
//! The pieces compose in pipeline order: [`processes`] defines the forward
//! corruption, [`models`] the conditional network, [`objectives`] the
//! regression and preference losses, [`training`] the optimizer loops,
//! [`guidance`] the samplers, [`preference_data`] the synthetic task and its
//! labelled pairs, and [`evaluation`] the oracle-reward reports.
//! [`pipeline`] ties them to files on disk.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod models;
pub mod objectives;
pub mod parallel;
pub mod pipeline;
pub mod plot;
pub mod preference_data;
pub mod processes;
pub mod training;

pub use error::{Error, Result};
