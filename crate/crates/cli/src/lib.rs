//! Batch pipeline and HTTP service for continuous indexed point exploration
//! of multivariate volumes.

pub mod cli;
pub mod service;
