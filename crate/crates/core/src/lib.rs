//! Contextual memory bank with proactive, context-triggered recall.
//!
//! Queries are stored as referent-anchored spatiotemporal activity memories
//! ([`store::Rsam`]) in a hybrid index: an R-tree over (lat, lon,
//! time-of-day) for coarse filtering and an HNSW graph over context
//! embeddings for semantic ranking. [`recall::proactive_step`] replays a
//! lifelog frame against the bank and resurfaces memories whose place, time,
//! referent and activity all line up again.

// `!(x > 0.0)` is used deliberately so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod embed;
pub mod geo;
pub mod hnsw;
pub mod recall;
pub mod rtree;
pub mod sim;
pub mod store;

use thiserror::Error;

pub use clock::{circular_diff_s, time_of_day, TimeOfDay, Timestamp};
pub use embed::{Embedding, EmbeddingProvider, HashingEmbedder};
pub use geo::{haversine_m, GeoPoint};

/// Out-of-range primitive values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValueError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("accuracy {0} must be finite and non-negative")]
    Accuracy(f64),
    #[error("timezone offset {0} min outside [-840, 840]")]
    TzOffset(i32),
    #[error("time of day {0} s outside [0, 86400)")]
    TimeOfDay(u32),
}
