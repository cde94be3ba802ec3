//! Planning toolkit for checkpoint intervals of malleable parallel
//! applications running on failure-prone clusters.
//!
//! The pipeline: ingest a failure trace ([`trace`]), estimate per-processor
//! failure/repair rates, describe the application ([`profile`]), pick a
//! rescheduling policy ([`policy`]), assemble a Markov chain over
//! (active, spare) processor configurations ([`chain`]), search for the
//! interval maximizing useful work per unit time ([`search`]), and validate
//! the recommendation with a trace-driven simulator ([`sim`]).

pub mod chain;
pub mod error;
pub mod policy;
pub mod profile;
pub mod search;
pub mod sim;
pub mod spares;
pub mod trace;

pub use error::{Error, Result};
