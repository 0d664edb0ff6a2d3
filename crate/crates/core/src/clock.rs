//! Time sources. Everything that stamps a timestamp takes a [`Clock`] so the
//! simulation harness can drive components with simulated time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    fn now_unix_nano(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_unix_nano(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(1)
            .max(1)
    }
}

/// Manually advanced clock shared between clones.
#[derive(Debug, Clone)]
pub struct SimClock(Arc<AtomicU64>);

impl SimClock {
    pub fn new(start_unix_nano: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_unix_nano)))
    }

    pub fn set(&self, unix_nano: u64) {
        self.0.store(unix_nano, Ordering::SeqCst);
    }

    pub fn advance(&self, nanos: u64) -> u64 {
        self.0.fetch_add(nanos, Ordering::SeqCst) + nanos
    }
}

impl Clock for SimClock {
    fn now_unix_nano(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_unix_nano(&self) -> u64 {
        (**self).now_unix_nano()
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_unix_nano(&self) -> u64 {
        (**self).now_unix_nano()
    }
}

/// Serde adapter for durations written as human-readable strings ("5s", "250ms").
pub mod duration_str {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&humantime::format_duration(*d).to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let s = String::deserialize(d)?;
        humantime::parse_duration(&s).map_err(serde::de::Error::custom)
    }
}
