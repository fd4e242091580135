use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// The gateway's notion of the current time, in milliseconds.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// A monotone counter advanced explicitly by its owner.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn new(start_ms: u64) -> LogicalClock {
        LogicalClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) -> u64 {
        self.0.fetch_add(ms, Ordering::SeqCst) + ms
    }

    /// Moves the clock forward to `ms`; never moves it back.
    pub fn set(&self, ms: u64) -> u64 {
        self.0.fetch_max(ms, Ordering::SeqCst).max(ms)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Milliseconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

pub fn floor_to(t: u64, quantum: u64) -> u64 {
    t - t % quantum
}

pub fn ceil_to(t: u64, quantum: u64) -> u64 {
    t.div_ceil(quantum) * quantum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding() {
        assert_eq!(ceil_to(3400, 1000), 4000);
        assert_eq!(ceil_to(4000, 1000), 4000);
        assert_eq!(floor_to(3999, 1000), 3000);
        assert_eq!(floor_to(0, 7), 0);
    }

    #[test]
    fn logical_clock_is_monotone() {
        let c = LogicalClock::new(10);
        assert_eq!(c.advance(5), 15);
        assert_eq!(c.set(3), 15);
        assert_eq!(c.set(20), 20);
        assert_eq!(c.now_ms(), 20);
    }
}
