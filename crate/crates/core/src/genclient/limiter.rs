//! Sliding-window send limiter.

use std::collections::VecDeque;
use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::{sleep_until, Instant};

/// Admits at most `limit` sends in any window of length `window`.
///
/// A send is admitted at `now` only if fewer than `limit` earlier sends
/// happened in `(now - window, now]`. Waiters are served in FIFO order.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    state: Mutex<State>,
}

#[derive(Debug, Default)]
struct State {
    recent: VecDeque<Instant>,
    log: Vec<Instant>,
}

impl RateLimiter {
    pub fn new(limit: usize, window: Duration) -> Self {
        assert!(limit >= 1, "rate limit must admit at least one send");
        RateLimiter {
            limit,
            window,
            state: Mutex::new(State::default()),
        }
    }

    pub fn per_minute(requests_per_minute: u32) -> Self {
        RateLimiter::new(requests_per_minute as usize, Duration::from_secs(60))
    }

    /// Wait until a send is admitted and record it.
    pub async fn acquire(&self) -> Instant {
        let mut st = self.state.lock().await;
        loop {
            let now = Instant::now();
            while st.recent.front().is_some_and(|t| *t + self.window <= now) {
                st.recent.pop_front();
            }
            if st.recent.len() < self.limit {
                st.recent.push_back(now);
                st.log.push(now);
                return now;
            }
            let oldest = *st.recent.front().expect("window is full");
            sleep_until(oldest + self.window).await;
        }
    }

    /// Timestamps of every admitted send, in admission order.
    pub async fn send_log(&self) -> Vec<Instant> {
        self.state.lock().await.log.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test(start_paused = true)]
    async fn burst_then_waits_for_window() {
        let limiter = RateLimiter::new(3, Duration::from_secs(10));
        let start = Instant::now();
        for _ in 0..3 {
            limiter.acquire().await;
        }
        assert_eq!(Instant::now(), start);
        let t = limiter.acquire().await;
        assert_eq!(t - start, Duration::from_secs(10));
    }
}
