//! Neural encrypted state transduction for ransomware classification.
//!
//! The crate covers the whole pipeline: seeded synthetic traces
//! ([`generator`]), preprocessing ([`preprocess`]), the numerical core
//! ([`dynamics`]), the residual transition model ([`model`]), evaluation
//! against a heuristic baseline ([`eval`]) and the command-line driver
//! ([`cli`]).

pub mod error;
pub mod fsutil;
pub mod seed;
pub mod statespace;

pub mod dynamics;
pub mod generator;
pub mod model;
pub mod preprocess;

pub mod cli;
pub mod eval;

pub use error::{NestError, Result};
