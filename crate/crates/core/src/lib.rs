//! Toolkit for building and evaluating a monolingual Greek masked language
//! model at desk scale.

pub mod autodiff;
pub mod baselines;
pub mod bert;
pub mod crf;
pub mod denoiser;
pub mod finetune;
pub mod metrics;
pub mod pretrain_data;
pub mod synthetic;
pub mod textnorm;
pub mod tokenizer;
pub mod trainer;
