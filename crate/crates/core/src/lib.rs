//! Membrane-phantom calibration of 3-D ultrasound probes.

pub mod campaign;
pub mod cli;
pub mod detect;
pub mod geometry;
pub mod metrics;
pub mod sim;
pub mod solver;
pub mod sos;
pub mod volume;
