//! Sliding-window admission control for requests and input tokens.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateLimits {
    pub input_tokens_per_minute: u64,
    pub requests_per_minute: u64,
}

impl Default for RateLimits {
    fn default() -> Self {
        RateLimits {
            input_tokens_per_minute: 1_000_000,
            requests_per_minute: 10_000,
        }
    }
}

/// Time source used by the limiter and retry backoff.
pub trait Clock: Send + Sync {
    /// Elapsed time since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only moves when slept on.
#[derive(Default)]
pub struct SimulatedClock {
    now: Mutex<Duration>,
}

impl SimulatedClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for SimulatedClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }
}

/// Tracks admissions over the trailing 60 seconds. A request is admitted when
/// both the request count and the input-token sum of the window, including
/// the new request, stay within limits. A single request larger than the
/// token budget is admitted once the window is empty.
#[derive(Debug)]
pub struct SlidingWindowLimiter {
    limits: RateLimits,
    admitted: VecDeque<(Duration, u64)>,
    tokens_in_window: u64,
}

impl SlidingWindowLimiter {
    pub fn new(limits: RateLimits) -> Self {
        SlidingWindowLimiter {
            limits,
            admitted: VecDeque::new(),
            tokens_in_window: 0,
        }
    }

    fn expire(&mut self, now: Duration) {
        while let Some(&(t, tokens)) = self.admitted.front() {
            if t + WINDOW <= now {
                self.admitted.pop_front();
                self.tokens_in_window -= tokens;
            } else {
                break;
            }
        }
    }

    /// Admits the request at `now`, or returns how long to wait before retrying.
    pub fn try_admit(&mut self, now: Duration, tokens: u64) -> Result<(), Duration> {
        self.expire(now);
        let fits_requests = (self.admitted.len() as u64) < self.limits.requests_per_minute;
        let fits_tokens = self.admitted.is_empty()
            || self.tokens_in_window + tokens <= self.limits.input_tokens_per_minute;
        if fits_requests && fits_tokens {
            self.admitted.push_back((now, tokens));
            self.tokens_in_window += tokens;
            return Ok(());
        }
        let (oldest, _) = self.admitted.front().copied().expect("window is non-empty");
        Err((oldest + WINDOW)
            .saturating_sub(now)
            .max(Duration::from_millis(1)))
    }
}

/// Thread-safe wrapper that blocks on the clock until admission.
pub struct RateLimiter {
    inner: Mutex<SlidingWindowLimiter>,
}

impl RateLimiter {
    pub fn new(limits: RateLimits) -> Self {
        RateLimiter {
            inner: Mutex::new(SlidingWindowLimiter::new(limits)),
        }
    }

    pub fn admit(&self, clock: &dyn Clock, tokens: u64) {
        loop {
            let wait = {
                let mut inner = self.inner.lock().unwrap();
                match inner.try_admit(clock.now(), tokens) {
                    Ok(()) => return,
                    Err(wait) => wait,
                }
            };
            clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn oversize_request_waits_for_empty_window() {
        let clock = SimulatedClock::default();
        let limiter = RateLimiter::new(RateLimits {
            input_tokens_per_minute: 100,
            requests_per_minute: 10,
        });
        limiter.admit(&clock, 60);
        clock.advance(Duration::from_secs(5));
        limiter.admit(&clock, 500);
        assert_eq!(clock.now(), Duration::from_secs(60));
    }

    #[test]
    fn request_count_limit() {
        let clock = SimulatedClock::default();
        let limiter = RateLimiter::new(RateLimits {
            input_tokens_per_minute: 1_000,
            requests_per_minute: 2,
        });
        limiter.admit(&clock, 1);
        limiter.admit(&clock, 1);
        assert_eq!(clock.now(), Duration::ZERO);
        limiter.admit(&clock, 1);
        assert_eq!(clock.now(), WINDOW);
    }

    proptest! {
        #[test]
        fn no_window_exceeds_limits(
            reqs in proptest::collection::vec((0u64..3_000, 1u64..400), 1..120),
            rpm in 1u64..15,
            tpm in 200u64..1_500,
        ) {
            let clock = SimulatedClock::default();
            let limiter = RateLimiter::new(RateLimits { input_tokens_per_minute: tpm, requests_per_minute: rpm });
            let mut log: Vec<(Duration, u64)> = Vec::new();
            for (gap_ms, tokens) in reqs {
                clock.advance(Duration::from_millis(gap_ms));
                limiter.admit(&clock, tokens);
                log.push((clock.now(), tokens));
            }
            for (i, &(start, _)) in log.iter().enumerate() {
                let in_window: Vec<_> = log[i..].iter().filter(|(t, _)| *t < start + WINDOW).collect();
                prop_assert!(in_window.len() as u64 <= rpm);
                let sum: u64 = in_window.iter().map(|(_, k)| k).sum();
                prop_assert!(sum <= tpm || in_window.len() == 1, "window tokens {} > {}", sum, tpm);
            }
        }
    }
}
