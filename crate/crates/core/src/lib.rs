//! Learning interference-nulling analog combiners from power measurements.
//!
//! A base station with an `M`-element ULA and `r`-bit phase shifters learns a
//! combining beam that keeps gain toward its target user while nulling
//! non-cooperative interferers. It never sees a channel: every decision comes
//! from on/off received-power readings. An actor-critic agent proposes phase
//! vectors, and an optional learned surrogate of the two power readings
//! stands in for the radio to save real measurements.

pub mod agent;
pub mod array;
pub mod channel;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod neuralnet;
pub mod surrogate;

pub use error::{Error, Result};
