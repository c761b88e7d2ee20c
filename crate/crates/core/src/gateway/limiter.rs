use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use tokio::time::Instant;

/// Window rate limiter: a token spent at time `t` comes back at `t + window`,
/// so any interval of length `window` holds at most `capacity` starts.
///
/// Time comes from `tokio::time`, which runs on a virtual clock when the
/// runtime is paused.
#[derive(Debug)]
pub struct WindowLimiter {
    capacity: usize,
    window: Duration,
    starts: Mutex<VecDeque<Instant>>,
}

impl WindowLimiter {
    pub fn new(capacity: usize, window: Duration) -> Self {
        assert!(capacity >= 1, "limiter capacity must be at least 1");
        assert!(!window.is_zero(), "limiter window must be positive");
        Self {
            capacity,
            window,
            starts: Mutex::new(VecDeque::with_capacity(capacity)),
        }
    }

    /// Waits until a start is permitted and records it.
    pub async fn acquire(&self) -> Instant {
        loop {
            let wait = {
                let mut starts = self.starts.lock().unwrap();
                let now = Instant::now();
                while starts
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= self.window)
                {
                    starts.pop_front();
                }
                if starts.len() < self.capacity {
                    starts.push_back(now);
                    return now;
                }
                (starts[0] + self.window) - now
            };
            tokio::time::sleep(wait).await;
        }
    }
}
