//! Discrete-latent variational recurrent models for learning dialog
//! structure, the HMM and K-means baselines they are compared against, and a
//! dialog-policy training harness whose rewards are shaped by the learned
//! state transitions.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod evaluation;
pub mod error;
pub mod features;
pub mod nn;
pub mod registry;
pub mod rl;
pub mod structure;
pub mod tape;
pub mod vrnn;

pub use error::{Error, Result};
