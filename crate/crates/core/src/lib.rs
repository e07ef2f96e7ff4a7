pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cma;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;
