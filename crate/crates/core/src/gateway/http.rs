use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{ChatRequest, GatewayConfig, GatewayError, LlmClient};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Assistant text together with delivery metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub correlation_id: String,
}

/// OpenAI-style chat-completions client with retries.
#[derive(Debug)]
pub struct HttpClient {
    config: GatewayConfig,
    agent: ureq::Agent,
    url: String,
    slots: Slots,
    next_id: AtomicU64,
}

enum Failure {
    Transient(GatewayError),
    Fatal(GatewayError),
}

impl HttpClient {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Config("no endpoint configured".into()))?;
        let url = format!("{}{}", endpoint.trim_end_matches('/'), config.path);
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            agent: ureq::Agent::new_with_config(agent_config),
            slots: Slots::new(config.max_in_flight),
            url,
            config,
            next_id: AtomicU64::new(1),
        })
    }

    fn backoff(&self, attempt: u32, rng: &mut ChaCha8Rng) -> Duration {
        let base = self.config.backoff_ms.saturating_mul(1u64 << attempt.min(20));
        let jittered = base as f64 * (1.0 + rng.gen_range(0.0..0.5));
        Duration::from_millis((jittered as u64).min(self.config.max_backoff_ms))
    }

    fn attempt(&self, body: &Value, correlation_id: &str, attempts: u32) -> Result<String, Failure> {
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .header("X-Request-Id", correlation_id);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Err(Failure::Transient(GatewayError::Network {
                    attempts,
                    message: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| {
            Failure::Transient(GatewayError::Network {
                attempts,
                message: e.to_string(),
            })
        })?;
        if status == 429 || status >= 500 {
            return Err(Failure::Transient(GatewayError::Http {
                status,
                attempts,
                body: text,
            }));
        }
        if !(200..300).contains(&status) {
            return Err(Failure::Fatal(GatewayError::Http {
                status,
                attempts,
                body: text,
            }));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Fatal(GatewayError::Parse(e.to_string())))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Failure::Fatal(GatewayError::Parse("missing choices[0].message.content".into())))
    }

    /// Sends `request`, retrying network errors, 429 and 5xx responses with
    /// exponential backoff and jitter.
    pub fn complete_detailed(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let correlation_id = format!("tb-{}-{n}", std::process::id());
        let body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(n);
        let _slot = self.slots.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, &correlation_id, attempts) {
                Ok(text) => {
                    log::info!("request {correlation_id} succeeded after {attempts} attempt(s)");
                    return Ok(Completion {
                        text,
                        attempts,
                        correlation_id,
                    });
                }
                Err(Failure::Fatal(e)) => {
                    log::warn!("request {correlation_id} failed: {e}");
                    return Err(e);
                }
                Err(Failure::Transient(e)) => {
                    if attempts > self.config.max_retries {
                        log::warn!("request {correlation_id} gave up: {e}");
                        return Err(e);
                    }
                    let wait = self.backoff(attempts - 1, &mut rng);
                    log::info!("request {correlation_id} attempt {attempts} failed ({e}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.complete_detailed(request).map(|c| c.text)
    }
}
