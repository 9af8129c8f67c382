use std::fmt::Debug;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Monotonic nanosecond clock shared by energy sources and the harness.
pub trait Clock: Send + Sync + Debug {
    fn now_ns(&self) -> u64;

    /// Blocks (or, for virtual clocks, advances) for `d`.
    fn sleep(&self, d: Duration);
}

/// Real time, measured from the moment the clock was created.
#[derive(Debug, Clone)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Deterministic clock that only moves when told to.
///
/// Clones share the same time. `sleep` advances the clock and wakes any
/// thread blocked in [`VirtualClock::wait_until`].
#[derive(Debug, Clone)]
pub struct VirtualClock {
    inner: Arc<(Mutex<u64>, Condvar)>,
}

impl VirtualClock {
    pub fn starting_at(now_ns: u64) -> Self {
        Self {
            inner: Arc::new((Mutex::new(now_ns), Condvar::new())),
        }
    }

    pub fn advance(&self, d: Duration) {
        let (lock, cvar) = &*self.inner;
        let mut now = lock.lock().unwrap();
        *now = now.saturating_add(d.as_nanos() as u64);
        cvar.notify_all();
    }

    /// Waits until virtual time reaches `deadline_ns` or `patience` of real
    /// time passes, and returns the virtual time observed on wake-up.
    pub fn wait_until(&self, deadline_ns: u64, patience: Duration) -> u64 {
        let (lock, cvar) = &*self.inner;
        let guard = lock.lock().unwrap();
        let (guard, _) = cvar
            .wait_timeout_while(guard, patience, |now| *now < deadline_ns)
            .unwrap();
        *guard
    }

    /// Wakes waiters without moving time.
    pub fn notify(&self) {
        self.inner.1.notify_all();
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        *self.inner.0.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}
