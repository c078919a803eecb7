//! Automated clinical coding: synthetic corpora, a windowed encoder with
//! label-wise attention, evaluation metrics and attribution.

pub mod analysis;
pub mod codesystem;
pub mod corpusgen;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod textprep;
pub mod trainer;
pub mod workflow;
