//! Signal-level LoRa chirp modem, a constructive-interference timing lab, and a
//! discrete-event class-A LoRaWAN simulator extended with relay boosters.

pub mod booster;
pub mod css;
pub mod error;
pub mod frame;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod wave;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
