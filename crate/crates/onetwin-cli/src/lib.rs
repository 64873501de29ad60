//! Command-line harness for the online digital network twin: configuration,
//! run modes, and experiment reproduction.

pub mod config;
pub mod harness;
