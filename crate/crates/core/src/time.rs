//! Simulation time in nanoseconds.

/// Nanoseconds since session start.
pub type Nanos = u64;

pub const NS_PER_MS: Nanos = 1_000_000;

#[inline]
pub const fn ms(v: u64) -> Nanos {
    v * NS_PER_MS
}

/// Fractional milliseconds, rounded to the nearest nanosecond.
#[inline]
pub fn ms_f(v: f64) -> Nanos {
    if v <= 0.0 {
        0
    } else {
        libm::round(v * NS_PER_MS as f64) as Nanos
    }
}

#[inline]
pub fn to_ms(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_MS as f64
}

#[inline]
pub fn to_ms_signed(ns: i64) -> f64 {
    ns as f64 / NS_PER_MS as f64
}
