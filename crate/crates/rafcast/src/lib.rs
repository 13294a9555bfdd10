//! File formats, data ingestion, the synthetic benchmark and the ablation
//! harness around [`rafcast_core`].

pub mod artifact;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod synth;
pub mod tskb;

pub use error::{Error, Result};
