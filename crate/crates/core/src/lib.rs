pub mod autodiff;
pub mod baselines;
pub mod binio;
pub mod checkpoint;
pub mod dataset_io;
pub mod encoder;
pub mod error;
pub mod features;
pub mod fit;
pub mod harness;
pub mod icl;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
