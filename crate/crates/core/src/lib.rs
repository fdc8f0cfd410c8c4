pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod ssl;
pub mod tensor;
pub mod vae;
