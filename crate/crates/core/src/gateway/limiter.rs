//! Bounded-concurrency primitives shared by all backend calls.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::backend::BackendError;

#[derive(Debug, Default)]
struct LimiterState {
    in_flight: usize,
    high_water: usize,
}

/// Counting semaphore that tracks the highest number of simultaneous
/// holders ever observed.
pub struct ConcurrencyLimiter {
    limit: usize,
    state: Mutex<LimiterState>,
    cv: Condvar,
}

impl ConcurrencyLimiter {
    /// `limit` is clamped to at least 1.
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new(LimiterState::default()),
            cv: Condvar::new(),
        }
    }

    /// Block until a slot is free, then hold it until the guard drops.
    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut state = self.state.lock().unwrap();
        while state.in_flight >= self.limit {
            state = self.cv.wait(state).unwrap();
        }
        state.in_flight += 1;
        state.high_water = state.high_water.max(state.in_flight);
        LimiterGuard { limiter: self }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().in_flight
    }

    /// Highest simultaneous-holder count seen so far.
    pub fn high_water(&self) -> usize {
        self.state.lock().unwrap().high_water
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().unwrap();
        state.in_flight -= 1;
        drop(state);
        self.limiter.cv.notify_one();
    }
}

/// Retry schedule for transient backend errors: `attempts` tries total with
/// exponential backoff (`base_delay`, doubled after each failure).
/// Permanent errors fail immediately.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

impl RetryPolicy {
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
        mut on_retry: impl FnMut(u32, &BackendError),
    ) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.base_delay;
        let mut tried = 0;
        loop {
            tried += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(err @ BackendError::Permanent(_)) => return Err(err),
                Err(err @ BackendError::Transient(_)) => {
                    if tried >= attempts {
                        return Err(err);
                    }
                    on_retry(tried, &err);
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}
