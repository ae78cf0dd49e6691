//! Monotonic time sources shared by the profiler and the mock backend.
//!
//! The mock backend and stage-delay injection call [`Clock::delay`], so under
//! a [`VirtualClock`] simulated costs advance time exactly and reports are
//! reproducible bit for bit.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync + Debug {
    /// Nanoseconds since an arbitrary fixed origin.
    fn now_ns(&self) -> u64;

    /// Lets `duration` of clock time pass.
    fn delay(&self, duration: Duration);

    fn kind(&self) -> ClockKind;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Wall,
    Virtual,
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

/// Slack left to spinning after a coarse sleep.
const SPIN_WINDOW: Duration = Duration::from_micros(300);

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn delay(&self, duration: Duration) {
        if duration.is_zero() {
            return;
        }
        let deadline = Instant::now() + duration;
        if duration > SPIN_WINDOW {
            std::thread::sleep(duration - SPIN_WINDOW);
        }
        while Instant::now() < deadline {
            std::hint::spin_loop();
        }
    }

    fn kind(&self) -> ClockKind {
        ClockKind::Wall
    }
}

#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn delay(&self, duration: Duration) {
        self.now.fetch_add(duration.as_nanos() as u64, Ordering::SeqCst);
    }

    fn kind(&self) -> ClockKind {
        ClockKind::Virtual
    }
}

pub fn wall() -> SharedClock {
    Arc::new(WallClock::default())
}

pub fn simulated() -> SharedClock {
    Arc::new(VirtualClock::default())
}

pub fn from_kind(kind: ClockKind) -> SharedClock {
    match kind {
        ClockKind::Wall => wall(),
        ClockKind::Virtual => simulated(),
    }
}

pub fn ms(value: f64) -> Duration {
    Duration::from_secs_f64(value.max(0.0) / 1e3)
}
