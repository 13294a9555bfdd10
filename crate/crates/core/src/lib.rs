//! Retrieval-augmented zero-shot time-series forecasting.
//!
//! A frozen patch-based forecaster is enhanced at inference time by windows
//! retrieved from an external knowledge base. A dual-encoder retriever scores
//! knowledge-base windows against the lookback window, the top-k are fused
//! into the input patch embedding by channel prompting, and both the retriever
//! and the fusion network are trained jointly while the forecaster stays
//! frozen. The retriever learns by KL distillation from the forecaster's own
//! per-candidate error.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, CSV ingestion
//! and the command line live in the `rafcast` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod kbase;
pub mod numkit;
pub mod retriever;
pub mod trainer;
pub mod tsdata;

pub use error::{Error, Result};
