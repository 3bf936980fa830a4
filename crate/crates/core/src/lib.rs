//! Data handling, provider clients, grouped splits, feature construction,
//! metrics and the gradient-boosted baseline for predicting how memorable a
//! commercial video is.

pub mod corpus;
pub mod features;
pub mod hgbt;
pub mod metrics;
pub mod providers;
pub mod splits;
