//! Simulation and analysis toolkit for non-contiguous channel allocation in
//! cognitive radio networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectrum`] – channel set, primary/secondary bands, occupancy and the
//!   per-node ordered channel-usage database.
//! * [`topology`] – random node placement and 1-/2-distance neighbor queries.
//! * [`alloc`] – randomized FDM-FDMA and OFDM-FDMA allocation plus first-fit
//!   and best-fit baselines.
//! * [`codec`] – bit-set decomposition of sampled frames into sub-packets.
//! * [`protocol`] – control-channel messages, node runtime and the
//!   discrete-event network engine.
//! * [`analysis`] – closed-form attempt theory and the reservation Markov
//!   chain.

pub mod alloc;
pub mod analysis;
pub mod codec;
pub mod error;
pub mod protocol;
pub mod spectrum;
pub mod topology;

pub use error::{Error, Result};
