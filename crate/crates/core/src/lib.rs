//! Reward artifacts learned from expert states alone, plus the audit and
//! refinement loop that hardens them.
//!
//! The crate is organised bottom-up: [`toyworld`] provides domains with a
//! ground-truth safety oracle, [`scorer`] and [`mapping`] turn states into
//! rewards, [`audit`], [`triage`] and [`refine`] implement the correction
//! loop and [`orchestrator`] drives whole cycles over a [`session::Session`].

pub mod artifact;
pub mod audit;
pub mod constraints;
pub mod error;
pub mod heatmap;
pub mod mapping;
pub mod orchestrator;
pub mod par;
pub mod recon;
pub mod refine;
pub mod rng;
pub mod scorer;
pub mod session;
pub mod shaping;
pub mod toyworld;
pub mod triage;

pub use artifact::RewardArtifact;
pub use error::{Error, Result};
pub use toyworld::{DomainBox, StateVec, ToyWorld};
