pub mod aggregate;
pub mod autoweight;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod fedsim;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
