//! Federated next-location prediction.
//!
//! Check-ins are encoded as venue tokens plus time-of-week buckets, each
//! client trains a small causal transformer locally and uploads only a
//! clipped, noised mean of consecutive-embedding outer products. The server
//! averages those into a global signal that a residual MLP projects into a
//! frozen language model at an intermediate layer; only the projection and
//! the output head are trained.

pub mod client;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod llm;
pub mod numeric;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
