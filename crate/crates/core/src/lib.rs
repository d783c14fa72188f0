//! Simulation, reconstruction and evaluation toolkit for bias-switchable
//! row-column (TOBE) ultrasound arrays.
//!
//! The pipeline is: build a [`phantoms::Phantom`] and a transmit
//! [`sequences::Sequence`] (FORCES, TPW or VLS), [`simulator::simulate`] the
//! RF channel data, decode FORCES data, beamform with the matching kernel in
//! [`beamform`], then envelope-detect ([`postproc`]) and measure
//! ([`metrics`]).

pub mod array;
pub mod beamform;
pub mod channel;
pub mod error;
pub mod io;
pub mod metrics;
pub mod phantoms;
pub mod pipeline;
pub mod postproc;
pub mod sequences;
pub mod simulator;

pub use array::ArrayConfig;
pub use channel::ChannelData;
pub use error::{Error, Result};
