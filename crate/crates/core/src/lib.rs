//! Double encoder-decoder segmentation, trained with sharpness-aware Adam
//! over rotating folds and combined with a tempered ensemble.

pub mod rng;
pub mod tensor;
pub mod nn;
pub mod optim;
pub mod ensemble;
pub mod metrics;
pub mod data;
pub mod pipeline;
