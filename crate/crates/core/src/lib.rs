//! Concurrent UWB ranging with response-position modulation: a radio and
//! channel simulator, the initiator-side CIR processing pipeline, and
//! multilateration.
//!
//! The usual flow is [`sim::Scenario`] → [`sim::run_static`] /
//! [`sim::run_trajectory`], or logged [`protocol::ExchangeRecord`]s fed to
//! [`sim::process_records`].

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cirproc;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod locate;
pub mod protocol;
pub mod radio;
pub mod ranging;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::Point;
