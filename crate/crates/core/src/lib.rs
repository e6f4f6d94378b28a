//! Monte Carlo system-level simulator for multi-cell irregular repetition
//! slotted aloha (IRSA) over massive-MIMO uplinks.
//!
//! A run drops users on a square grid of cells, draws IRSA access patterns,
//! pilots and block-fading channels, and then lets every base station
//! iterate joint MMSE channel estimation, linear combining and SINR-threshold
//! successive interference cancellation. Throughput is reported for the
//! center cell.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod access;
pub mod channel;
pub mod decoder;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod numerics;
pub mod pilots;
pub mod receiver;
pub mod topology;

pub use error::{Error, Result};
