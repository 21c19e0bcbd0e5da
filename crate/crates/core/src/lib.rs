//! Cooperative lane-change planning for a tractor-trailer in dense traffic.

pub mod batch;
pub mod constraints;
pub mod error;
pub mod models;
pub mod ocp;
pub mod planner;
pub mod predictor;
pub mod qp;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
