//! Explanation as model reconciliation for tabular MDPs.
//!
//! The pipeline: build a domain MDP from a layout and a parameter
//! assignment, simulate (or collect) explicability labels under explanation
//! messages, learn a labeling tree, and select the message subset that
//! trades communication cost against predicted inexplicability.

pub mod domains;
pub mod error;
pub mod explainer;
pub mod harness;
pub mod label_service;
pub mod learner;
pub mod mdp;
pub mod reconciliation;
pub mod search;
pub mod sim_user;

pub use error::{Error, Result};
