//! Target-driven visual navigation: a 2-D world with rendered observations, expert
//! planners for data collection, a dual-encoder transformer policy, and the training
//! and evaluation loops around it.

pub mod config;
pub mod datasets;
pub mod evalkit;
pub mod expert;
pub mod geometry;
pub mod nn;
pub mod policy;
pub mod raycam;
pub mod trainkit;
pub mod vision;
pub mod worldsim;
