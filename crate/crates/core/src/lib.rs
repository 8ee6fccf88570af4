pub mod rng;
pub mod sigsynth;
pub mod cli;
pub mod models;
pub mod report;
pub mod tensorcore;
pub mod trainer;
