use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use super::clock::Clock;

const WINDOW_MS: u64 = 1000;

/// Sliding-window limiter: at most `per_second` acquisitions in any 1 s window.
///
/// The internal lock is held while waiting, so dispatch through one limiter is serialized.
pub struct RateLimiter {
    per_second: u32,
    clock: Arc<dyn Clock>,
    log: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    pub fn new(per_second: u32, clock: Arc<dyn Clock>) -> Self {
        assert!(per_second > 0, "rate limit must be positive");
        Self {
            per_second,
            clock,
            log: Mutex::new(VecDeque::new()),
        }
    }

    pub fn per_second(&self) -> u32 {
        self.per_second
    }

    /// Block until a slot is free, then claim it. Returns the dispatch timestamp.
    pub fn acquire(&self) -> u64 {
        let mut log = self.log.lock().expect("rate limiter poisoned");
        loop {
            let now = self.clock.now_ms();
            while log.front().is_some_and(|&t| t + WINDOW_MS <= now) {
                log.pop_front();
            }
            if log.len() < self.per_second as usize {
                log.push_back(now);
                return now;
            }
            let oldest = *log.front().expect("non-empty when full");
            self.clock.sleep_ms(oldest + WINDOW_MS - now);
        }
    }
}
