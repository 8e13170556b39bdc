//! Pipeline around the nighttime de-raining and fusion networks: dataset
//! synthesis, two training stages, inference, metric evaluation, and report
//! generation. The binary in `main.rs` is a thin command-line front end over
//! these modules.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod infer;
pub mod manifest;
pub mod model;
pub mod pngio;
pub mod report;
pub mod synth;
pub mod train_clean;
pub mod train_fusion;
pub mod trainlog;
