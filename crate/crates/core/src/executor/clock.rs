//! Monotonic wall-clock helpers.

use std::time::Instant;

#[inline]
pub fn now() -> Instant {
    Instant::now()
}

/// Nanoseconds from `start` to `end`, zero if `end` precedes `start`.
#[inline]
pub fn elapsed_ns(start: Instant, end: Instant) -> u64 {
    end.saturating_duration_since(start).as_nanos() as u64
}
