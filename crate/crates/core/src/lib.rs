pub mod autodiff;
pub mod data;
pub mod error;
pub mod format;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod policy;
pub mod sharing;
pub mod vit;
pub mod policy_net;
pub mod segmenter;
pub mod eval;
pub mod config;
pub mod cli;
