//! Online digital network twin for RSRP prediction.
//!
//! The twin couples two components kept in sync by streaming measurements:
//!
//! * an image-method RF ray tracer whose per-building materials are tuned
//!   online by categorical Bayesian optimization ([`raytracer`], [`tuner`],
//!   [`surrogate`]), and
//! * a neural radio radiance field updated continually from hybrid batches of
//!   online measurements and enhanced-simulator samples ([`nrrf`], [`online`]).
//!
//! [`worldbench`] provides a synthetic stand-in for the live network so the
//! whole loop is measurable end to end, and [`scene`] holds the shared scene
//! model and file format.

pub mod geometry;
pub mod nrrf;
pub mod online;
pub mod raytracer;
pub mod scene;
pub mod surrogate;
pub mod tuner;
pub mod worldbench;
