//! Segment-level domain adaptation with a fixed simplex-ETF classifier.

mod error;
pub mod etf;
pub mod losses;
pub mod networks;
pub mod noise;
pub mod pipeline;
pub mod synthdata;
pub mod teacher;

pub use error::{CoreError, Result};
pub use etf::{EtfClassifier, Reduction};
