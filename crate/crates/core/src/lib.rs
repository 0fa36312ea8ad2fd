//! Simulation laboratory for reflective sensing channels, real-time identity
//! classes, and an auto-resilient control loop that learns across shocks.
//!
//! The modules follow the data flow of one tick: [`environment`] drifts and
//! shocks the raw facts, [`reflection`] turns them into qualia and Δ,
//! [`identity`] guards contracts, [`controller`] switches modes and picks
//! strategies, [`behavior`] and [`collective`] act, and [`engine`] ties it
//! together. [`scenario`] is the config schema and [`export`] writes results.

pub mod behavior;
pub mod collective;
pub mod controller;
pub mod engine;
pub mod environment;
pub mod export;
pub mod identity;
pub mod reflection;
pub mod rng;
pub mod scenario;

pub use engine::{run_scenario, RunOptions, RunResult};
pub use scenario::Scenario;
