//! Active information gathering for interaction-aware driving.
//!
//! A robot car keeps a discrete belief over a hidden parameter of a nearby
//! human driver (desired speed or desired headway), chooses controls that make
//! the driver reveal that parameter, then uses the estimate to influence the
//! driver toward a traffic objective.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod divergence;
pub mod dynamics;
pub mod inference;
pub mod model;
pub mod par;
pub mod planning;
pub mod scenario;

pub use par::Parallelism;
