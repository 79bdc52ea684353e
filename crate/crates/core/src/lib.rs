//! Explanation-keyed demonstration retrieval for few-shot grammatical error
//! correction: corpus handling, LLM backends, the dual sample database, the
//! prediction pipeline, and M2-style scoring.

pub mod corpus;
pub mod database;
pub mod embed;
pub mod error;
pub mod eval;
pub mod llm;
pub mod pipeline;

pub use error::{Error, Result};

use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Environment variable that pins timestamps and elapsed times for
/// reproducible artifacts.
pub const ENV_SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

fn pinned_epoch() -> Option<u64> {
    std::env::var(ENV_SOURCE_DATE_EPOCH).ok()?.trim().parse().ok()
}

/// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set.
pub fn unix_timestamp() -> u64 {
    pinned_epoch().unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

/// Seconds since `started`; 0 when `SOURCE_DATE_EPOCH` is set.
pub fn elapsed_seconds(started: Instant) -> f64 {
    if pinned_epoch().is_some() {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    }
}
