//! Numerical laboratory for the entropy of uniformly quasiregular maps.
//!
//! The crate builds concrete model systems (linear and sheared toral
//! endomorphisms, power maps of the Riemann sphere), approximates their
//! balanced measures by preimage trees, and estimates topological and
//! measure-theoretic entropy together with the volume and density growth
//! rates of their chain graphs. Every estimator is seeded through
//! [`SeedStream`] and reduced in a fixed order, so results do not depend
//! on the number of worker threads.

pub mod error;
pub mod audits;
pub mod cli;
pub mod geometry;
pub mod graph_geometry;
pub mod dynamics;
pub mod entropy_measure;
pub mod entropy_top;
pub mod measures;
pub mod reduce;
pub mod rng;

pub use error::{LabError, Result};
pub use rng::SeedStream;
