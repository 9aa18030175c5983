pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod covariance;
pub mod data;
pub mod error;
mod init;
pub mod losses;
pub mod metrics;
pub mod plot;
pub mod trainer;

pub use error::{Result, SdfaError};
