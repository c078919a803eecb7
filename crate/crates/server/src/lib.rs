//! Command line and HTTP front ends for the `medcode` engine.

pub mod cli;
pub mod http;
