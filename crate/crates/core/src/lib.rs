pub mod baselines;
pub mod datasets;
pub mod ensemble;
pub mod experiments;
pub mod export;
pub mod error;
pub mod feature_net;
pub mod metrics;
pub mod model;
pub mod multitask;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{NamError, Result};
