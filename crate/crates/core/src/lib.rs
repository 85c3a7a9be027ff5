pub mod error;
pub mod netsim;
pub mod qoe;
pub mod seed;
pub mod tensor;
pub mod trace;
pub mod vqpn;
pub mod vqrl;

pub use error::{Error, Result};

/// Candidate encode bitrates, ascending.
pub const BITRATES_KBPS: [f64; 5] = [300.0, 500.0, 800.0, 1100.0, 1400.0];
