pub mod attention;
pub mod cli;
pub mod collab;
pub mod datamodel;
pub mod error;
pub mod features;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod postprocess;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
