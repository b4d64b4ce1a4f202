//! Causality-aware multiple-instance learning over precomputed feature bags.
//!
//! A slide is a bag of instance feature vectors. The model pools the bag with
//! a critical-instance attention query, embeds the pooled image node and the
//! patient's demographics into a three-node graph `X -> Z <- U`, runs masked
//! graph attention over it, and classifies from the disease node `Z`.
//! Demographic influence is measured by intervening on `U` and observing the
//! shift in `Z`.

pub mod bagio;
pub mod cli;
pub mod diffmath;
pub mod error;
pub mod evalmetrics;
pub mod milnet;
pub mod objectives;
pub mod scmgraph;
pub mod trainer;

pub use error::{Error, Result};
