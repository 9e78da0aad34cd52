//! Malware fingerprinting over Dalvik-style assembly: canonical instruction
//! extraction, fragment-based CNN ensemble detection with confidence-gated
//! verdicts and adaptation, and family clustering of detected malware.

pub mod asmparse;
pub mod error;

pub use error::{Error, Result};
pub mod adapt;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod detect;
pub mod digest;
pub mod featurize;
pub mod fragment;
pub mod inst2vec;
pub mod pipeline;
pub mod seed;
