pub mod baselines;
pub mod cli;
pub mod data;
pub mod diff;
pub mod interpret;
pub mod models;
pub mod preprocess;
pub mod segmentation;
pub mod synth;
pub mod train;
