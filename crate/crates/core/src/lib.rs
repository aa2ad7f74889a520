//! Conditioned autoregressive sound synthesis with a stacked-GRU network
//! predicting one mu-law sample at a time from the previous sample and
//! real-valued pitch, volume and instrument parameters.

mod bytes;

pub mod analysis;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod network;
pub mod protocol;
pub mod signals;
pub mod synthesis;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
