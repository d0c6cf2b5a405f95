//! Chat-completion gateway: request identity, rate limiting, retries,
//! usage accounting and the record/replay cache.

mod http;
mod limiter;
mod scripted;
mod store;

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::HttpBackend;
pub use limiter::{
    Clock, RateLimiter, RateLimits, SimulatedClock, SlidingWindowLimiter, SystemClock, WINDOW,
};
pub use scripted::{Script, ScriptRule, ScriptedBackend};
pub use store::{ReplayStore, StoreMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    /// Ask the provider for a JSON-object response.
    pub structured_output: bool,
    /// Distinguishes repeated samples of an otherwise identical prompt.
    pub sample_index: u32,
}

impl CompletionRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        CompletionRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 1.0,
            structured_output: false,
            sample_index: 0,
        }
    }

    pub fn structured(mut self) -> Self {
        self.structured_output = true;
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_sample(mut self, i: u32) -> Self {
        self.sample_index = i;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user_text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// SHA-256 over length-prefixed request fields, hex encoded.
pub fn cache_key(request: &CompletionRequest, model_id: &str) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(model_id.as_bytes());
    field(request.system_text.as_bytes());
    field(request.user_text.as_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    field(&[request.structured_output as u8]);
    field(&request.sample_index.to_le_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Provider-reported usage, if any.
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct BackendError {
    pub transient: bool,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError {
            transient: true,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        BackendError {
            transient: false,
            message: message.into(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        request: &CompletionRequest,
        model: &str,
    ) -> Result<Completion, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay cache miss for key {key}")]
    CacheMiss { key: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("no live backend configured")]
    NoBackend,
    #[error("replay store is read-only")]
    ReadOnlyStore,
    #[error("cache store {path}: {message}")]
    Store { path: PathBuf, message: String },
}

/// Prompt-token estimate used for admission control and when the provider
/// does not report usage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEstimator {
    pub chars_per_token: f64,
}

impl Default for TokenEstimator {
    fn default() -> Self {
        TokenEstimator {
            chars_per_token: 4.0,
        }
    }
}

impl TokenEstimator {
    pub fn estimate(&self, text: &str) -> u64 {
        (text.chars().count() as f64 / self.chars_per_token).ceil() as u64
    }

    pub fn estimate_request(&self, r: &CompletionRequest) -> u64 {
        self.estimate(&r.system_text) + self.estimate(&r.user_text)
    }
}

/// Per-token prices, in currency units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prices {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Live provider requests that returned a completion.
    pub requests: u64,
    pub cache_hits: u64,
    pub estimated_cost: f64,
}

impl UsageLedger {
    pub fn cost(&self, prices: &Prices) -> f64 {
        self.prompt_tokens as f64 * prices.input_per_token
            + self.completion_tokens as f64 * prices.output_per_token
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 6,
            base_delay_ms: 1_000,
            max_delay_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter delay before retry number `attempt` (1-based).
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(32));
        let ceiling = exp.min(self.max_delay_ms);
        Duration::from_millis(rng.random_range(0..=ceiling))
    }
}

pub struct Gateway {
    model_id: String,
    backend: Option<Arc<dyn ChatBackend>>,
    store: Option<ReplayStore>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    estimator: TokenEstimator,
    prices: Prices,
    ledger: Mutex<UsageLedger>,
}

pub struct GatewayBuilder {
    model_id: String,
    backend: Option<Arc<dyn ChatBackend>>,
    store: Option<ReplayStore>,
    limits: RateLimits,
    clock: Arc<dyn Clock>,
    retry: RetryPolicy,
    estimator: TokenEstimator,
    prices: Prices,
}

impl GatewayBuilder {
    pub fn backend(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.backend = Some(backend);
        self
    }

    pub fn store(mut self, store: ReplayStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn limits(mut self, limits: RateLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn estimator(mut self, estimator: TokenEstimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn prices(mut self, prices: Prices) -> Self {
        self.prices = prices;
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            model_id: self.model_id,
            backend: self.backend,
            store: self.store,
            limiter: RateLimiter::new(self.limits),
            clock: self.clock,
            retry: self.retry,
            estimator: self.estimator,
            prices: self.prices,
            ledger: Mutex::new(UsageLedger::default()),
        }
    }
}

impl Gateway {
    pub fn builder(model_id: impl Into<String>) -> GatewayBuilder {
        GatewayBuilder {
            model_id: model_id.into(),
            backend: None,
            store: None,
            limits: RateLimits::default(),
            clock: Arc::new(SystemClock::default()),
            retry: RetryPolicy::default(),
            estimator: TokenEstimator::default(),
            prices: Prices::default(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn ledger(&self) -> UsageLedger {
        let mut l = *self.ledger.lock().unwrap();
        l.estimated_cost = l.cost(&self.prices);
        l
    }

    /// Returns the completion text for `request`, consulting the cache first.
    /// In replay mode a miss is an error and the backend is never called.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let key = cache_key(request, &self.model_id);
        if let Some(store) = &self.store {
            if let Some(text) = store.get(&key)? {
                self.ledger.lock().unwrap().cache_hits += 1;
                return Ok(text);
            }
            if store.mode() == StoreMode::Replay {
                return Err(GatewayError::CacheMiss { key });
            }
        }
        let completion = self.call_live(request)?;
        if let Some(store) = &self.store {
            store.put(&key, &completion.text)?;
        }
        Ok(completion.text)
    }

    fn call_live(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let backend = self.backend.as_ref().ok_or(GatewayError::NoBackend)?;
        let prompt_estimate = self.estimator.estimate_request(request);
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.admit(self.clock.as_ref(), prompt_estimate);
            match backend.complete(request, &self.model_id) {
                Ok(c) => {
                    let usage = c.usage.unwrap_or(Usage {
                        prompt_tokens: prompt_estimate,
                        completion_tokens: self.estimator.estimate(&c.text),
                    });
                    let mut l = self.ledger.lock().unwrap();
                    l.requests += 1;
                    l.prompt_tokens += usage.prompt_tokens;
                    l.completion_tokens += usage.completion_tokens;
                    return Ok(c);
                }
                Err(e) if e.transient && attempt < self.retry.max_attempts => {
                    tracing::warn!(attempt, error = %e.message, "transient completion failure, backing off");
                    self.clock.sleep(self.retry.delay(attempt, &mut rng));
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        message: e.message,
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: AtomicU32,
        calls: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, r: &CompletionRequest, _: &str) -> Result<Completion, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::transient("503"));
            }
            Ok(Completion {
                text: format!("echo:{}:{}", r.user_text, r.sample_index),
                usage: Some(Usage {
                    prompt_tokens: 10,
                    completion_tokens: 3,
                }),
            })
        }
    }

    fn flaky(failures: u32) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures: AtomicU32::new(failures),
            calls: AtomicU32::new(0),
        })
    }

    fn sim() -> Arc<SimulatedClock> {
        Arc::new(SimulatedClock::default())
    }

    #[test]
    fn cache_key_identity() {
        let r = CompletionRequest::new("s", "hello");
        assert_eq!(cache_key(&r, "m"), cache_key(&r.clone(), "m"));
        assert_ne!(
            cache_key(&r, "m"),
            cache_key(&CompletionRequest::new("s", "hellp"), "m")
        );
        assert_ne!(
            cache_key(&r, "m"),
            cache_key(&r.clone().with_sample(1), "m")
        );
        assert_ne!(cache_key(&r, "m"), cache_key(&r, "m2"));
        assert_ne!(cache_key(&r, "m"), cache_key(&r.clone().structured(), "m"));
        // field boundaries are unambiguous
        assert_ne!(
            cache_key(&CompletionRequest::new("ab", "c"), "m"),
            cache_key(&CompletionRequest::new("a", "bc"), "m")
        );
    }

    #[test]
    fn retries_transient_failures() {
        let backend = flaky(2);
        let clock = sim();
        let gw = Gateway::builder("m")
            .backend(backend.clone())
            .clock(clock.clone())
            .build();
        assert_eq!(
            gw.complete(&CompletionRequest::new("", "q")).unwrap(),
            "echo:q:0"
        );
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(gw.ledger().requests, 1);
    }

    #[test]
    fn exhausted_retries_is_transport_error() {
        let backend = flaky(100);
        let gw = Gateway::builder("m")
            .backend(backend.clone())
            .clock(sim())
            .build();
        match gw.complete(&CompletionRequest::new("", "q")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 6),
            other => panic!("{other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 6);
        assert_eq!(gw.ledger().requests, 0);
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy::default();
        let mut rng = rand::rng();
        for attempt in 1..=20 {
            assert!(p.delay(attempt, &mut rng) <= Duration::from_secs(60));
        }
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let backend = flaky(0);
        let rec = Gateway::builder("m")
            .backend(backend.clone())
            .store(ReplayStore::open(dir.path(), StoreMode::Record).unwrap())
            .clock(sim())
            .build();
        let r0 = CompletionRequest::new("s", "q");
        let r1 = r0.clone().with_sample(1);
        assert_eq!(rec.complete(&r0).unwrap(), "echo:q:0");
        assert_eq!(rec.complete(&r1).unwrap(), "echo:q:1");
        assert_eq!(rec.complete(&r0).unwrap(), "echo:q:0");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(rec.ledger().cache_hits, 1);

        let live = flaky(0);
        let rep = Gateway::builder("m")
            .backend(live.clone())
            .store(ReplayStore::open(dir.path(), StoreMode::Replay).unwrap())
            .build();
        assert_eq!(rep.complete(&r1).unwrap(), "echo:q:1");
        assert!(matches!(
            rep.complete(&r0.clone().with_sample(2)),
            Err(GatewayError::CacheMiss { .. })
        ));
        assert_eq!(live.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn token_budget_delays_admission() {
        let clock = sim();
        let gw = Gateway::builder("m")
            .backend(flaky(0))
            .clock(clock.clone())
            .limits(RateLimits {
                input_tokens_per_minute: 10,
                requests_per_minute: 100,
            })
            .build();
        gw.complete(&CompletionRequest::new("", "x".repeat(32)))
            .unwrap();
        assert_eq!(clock.now(), Duration::ZERO);
        gw.complete(&CompletionRequest::new("", "y".repeat(32)))
            .unwrap();
        assert_eq!(clock.now(), WINDOW);
        assert_eq!(gw.ledger().requests, 2);
    }

    #[test]
    fn ledger_cost_is_linear_in_tokens() {
        let gw = Gateway::builder("m")
            .backend(flaky(0))
            .clock(sim())
            .prices(Prices {
                input_per_token: 0.5,
                output_per_token: 2.0,
            })
            .build();
        for i in 0..3 {
            gw.complete(&CompletionRequest::new("", format!("q{i}")))
                .unwrap();
        }
        let l = gw.ledger();
        assert_eq!((l.prompt_tokens, l.completion_tokens), (30, 9));
        assert_eq!(l.estimated_cost, 30.0 * 0.5 + 9.0 * 2.0);
    }

    #[test]
    fn rejects_invalid_requests() {
        let gw = Gateway::builder("m").backend(flaky(0)).build();
        assert!(matches!(
            gw.complete(&CompletionRequest::new("s", "  ")),
            Err(GatewayError::InvalidRequest(_))
        ));
        assert!(gw
            .complete(&CompletionRequest::new("s", "q").with_temperature(2.5))
            .is_err());
    }

    #[test]
    fn estimator_counts_chars_over_four() {
        let e = TokenEstimator::default();
        assert_eq!(e.estimate(""), 0);
        assert_eq!(e.estimate("abcd"), 1);
        assert_eq!(e.estimate("abcde"), 2);
    }
}
