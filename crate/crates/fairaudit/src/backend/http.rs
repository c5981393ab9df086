//! Blocking chat-completion client with exponential-backoff retries.
//!
//! Wire shape: POST {base}/chat/completions with a single user message; the
//! reply text is choices[0].message.content. Credentials come from the
//! environment, never from config files.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendError, BackendResponse, GenerationParams, RateLimiter};

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Base URL up to the API root, e.g. "https://api.openai.com/v1".
    pub base_url: String,
    pub api_key: Option<String>,
    pub connect_timeout: Duration,
    pub request_timeout: Duration,
}

impl EndpointConfig {
    pub fn new(base_url: &str) -> Self {
        EndpointConfig {
            base_url: base_url.to_string(),
            api_key: None,
            connect_timeout: Duration::from_secs(10),
            request_timeout: Duration::from_secs(120),
        }
    }

    /// Reads the credential from `env_var`, erroring when unset.
    pub fn with_key_from_env(mut self, env_var: &str) -> Result<Self, BackendError> {
        match std::env::var(env_var) {
            Ok(key) if !key.trim().is_empty() => {
                self.api_key = Some(key);
                Ok(self)
            }
            _ => Err(BackendError::MissingCredential(env_var.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(attempt.saturating_sub(1)));
        let capped = exp.min(self.max_delay);
        // +-20% jitter to spread synchronized retries.
        let factor = 0.8 + rand::random::<f64>() * 0.4;
        capped.mul_f64(factor)
    }
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    limiter: Option<Arc<RateLimiter>>,
}

enum AttemptOutcome {
    Done(String),
    Retry(String),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(
        endpoint: EndpointConfig,
        retry: RetryPolicy,
        limiter: Option<Arc<RateLimiter>>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .connect_timeout(endpoint.connect_timeout)
            .timeout(endpoint.request_timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            client,
            endpoint,
            retry,
            limiter,
        })
    }

    /// Sends one completion request, retrying transient failures (429, 5xx,
    /// transport errors) with exponential backoff. Auth rejections and
    /// context overflows are surfaced immediately, never retried.
    pub fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<BackendResponse, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let url = format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        );
        let mut body = json!({
            "model": params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(stop) = &params.stop_sequences {
            body["stop"] = json!(stop);
        }

        let start = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.attempt(&url, &body) {
                AttemptOutcome::Done(text) => {
                    return Ok(BackendResponse {
                        text,
                        latency: start.elapsed(),
                        from_cache: false,
                        attempt_count: attempt,
                    })
                }
                AttemptOutcome::Fail(err) => return Err(err),
                AttemptOutcome::Retry(message) => {
                    if attempt > self.retry.max_retries {
                        return Err(if message.contains("429") {
                            BackendError::RateLimited { attempts: attempt }
                        } else {
                            BackendError::Transport {
                                attempts: attempt,
                                message,
                            }
                        });
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }

    fn attempt(&self, url: &str, body: &Value) -> AttemptOutcome {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.endpoint.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => return AttemptOutcome::Retry(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        let text = response.text().unwrap_or_default();
        match status {
            200 => match extract_completion(&text) {
                Ok(content) => AttemptOutcome::Done(content),
                Err(e) => AttemptOutcome::Fail(e),
            },
            401 | 403 => AttemptOutcome::Fail(BackendError::Auth { status }),
            429 => AttemptOutcome::Retry("429 rate limited".to_string()),
            500..=599 => AttemptOutcome::Retry(format!("server error {status}")),
            _ if is_context_overflow(&text) => AttemptOutcome::Fail(BackendError::OversizePrompt {
                detail: truncate(&text, 200),
            }),
            _ => AttemptOutcome::Fail(BackendError::Http {
                status,
                body: truncate(&text, 200),
            }),
        }
    }
}

fn extract_completion(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedResponse(format!("not JSON: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| {
            BackendError::MalformedResponse("missing choices[0].message.content".into())
        })
}

fn is_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    lower.contains("context_length_exceeded")
        || lower.contains("context length")
        || lower.contains("maximum context")
        || lower.contains("too many tokens")
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    /// Minimal scripted HTTP server: serves the given (status, body) pairs
    /// in order, recording request bodies and the hit count.
    struct ScriptedServer {
        base_url: String,
        hits: Arc<AtomicUsize>,
        bodies: Arc<Mutex<Vec<String>>>,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl ScriptedServer {
        fn start(responses: Vec<(u16, String)>) -> Self {
            let listener = TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap();
            let hits = Arc::new(AtomicUsize::new(0));
            let bodies = Arc::new(Mutex::new(Vec::new()));
            let hits2 = hits.clone();
            let bodies2 = bodies.clone();
            let handle = std::thread::spawn(move || {
                for (status, body) in responses {
                    let (stream, _) = match listener.accept() {
                        Ok(s) => s,
                        Err(_) => return,
                    };
                    let mut reader = BufReader::new(stream);
                    let mut content_length = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            break;
                        }
                        let lower = line.to_ascii_lowercase();
                        if let Some(rest) = lower.strip_prefix("content-length:") {
                            content_length = rest.trim().parse().unwrap_or(0);
                        }
                        if line == "\r\n" || line == "\n" {
                            break;
                        }
                    }
                    let mut request_body = vec![0u8; content_length];
                    reader.read_exact(&mut request_body).ok();
                    bodies2
                        .lock()
                        .unwrap()
                        .push(String::from_utf8_lossy(&request_body).to_string());
                    hits2.fetch_add(1, Ordering::SeqCst);

                    let mut stream = reader.into_inner();
                    let reason = match status {
                        200 => "OK",
                        400 => "Bad Request",
                        401 => "Unauthorized",
                        429 => "Too Many Requests",
                        _ => "Error",
                    };
                    let response = format!(
                        "HTTP/1.1 {status} {reason}\r\nContent-Length: {}\r\nContent-Type: application/json\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    stream.write_all(response.as_bytes()).ok();
                }
            });
            ScriptedServer {
                base_url: format!("http://{addr}/v1"),
                hits,
                bodies,
                handle: Some(handle),
            }
        }

        fn backend(&self) -> HttpBackend {
            let endpoint = EndpointConfig {
                api_key: Some("test-key".into()),
                ..EndpointConfig::new(&self.base_url)
            };
            let retry = RetryPolicy {
                max_retries: 3,
                base_delay: Duration::from_millis(1),
                max_delay: Duration::from_millis(5),
            };
            HttpBackend::new(endpoint, retry, None).unwrap()
        }

        fn finish(mut self) -> (usize, Vec<String>) {
            if let Some(h) = self.handle.take() {
                h.join().unwrap();
            }
            (
                self.hits.load(Ordering::SeqCst),
                self.bodies.lock().unwrap().clone(),
            )
        }
    }

    fn ok_body(text: &str) -> String {
        serde_json::to_string(&serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}]
        }))
        .unwrap()
    }

    #[test]
    fn retries_through_429_and_counts_attempts() {
        let rate_limited = (429, r#"{"error": {"message": "slow down"}}"#.to_string());
        let server = ScriptedServer::start(vec![
            rate_limited.clone(),
            rate_limited.clone(),
            rate_limited,
            (200, ok_body("OUTPUT: 1 (Stress)")),
        ]);
        let backend = server.backend();
        let response = backend
            .complete("prompt", &GenerationParams::new("gpt-4"))
            .unwrap();
        assert_eq!(response.attempt_count, 4);
        assert_eq!(response.text, "OUTPUT: 1 (Stress)");
        assert!(!response.from_cache);
        let (hits, _) = server.finish();
        assert_eq!(hits, 4);
    }

    #[test]
    fn exhausted_retries_surface_rate_limiting() {
        let rate_limited = (429, "{}".to_string());
        let server = ScriptedServer::start(vec![
            rate_limited.clone(),
            rate_limited.clone(),
            rate_limited.clone(),
            rate_limited,
        ]);
        let backend = server.backend();
        let err = backend
            .complete("prompt", &GenerationParams::new("gpt-4"))
            .unwrap_err();
        assert!(matches!(err, BackendError::RateLimited { attempts: 4 }));
        server.finish();
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let server = ScriptedServer::start(vec![(401, "{}".to_string())]);
        let backend = server.backend();
        let err = backend
            .complete("prompt", &GenerationParams::new("gpt-4"))
            .unwrap_err();
        assert!(matches!(err, BackendError::Auth { status: 401 }));
        assert!(err.is_fatal());
        let (hits, _) = server.finish();
        assert_eq!(hits, 1);
    }

    #[test]
    fn context_overflow_is_surfaced_not_retried() {
        let server = ScriptedServer::start(vec![(
            400,
            r#"{"error": {"code": "context_length_exceeded", "message": "too long"}}"#.to_string(),
        )]);
        let backend = server.backend();
        let err = backend
            .complete("prompt", &GenerationParams::new("gpt-4"))
            .unwrap_err();
        assert!(matches!(err, BackendError::OversizePrompt { .. }));
        let (hits, _) = server.finish();
        assert_eq!(hits, 1);
    }

    #[test]
    fn server_errors_retry_then_succeed() {
        let server = ScriptedServer::start(vec![
            (503, "oops".to_string()),
            (200, ok_body("OUTPUT: 0 (Non-stress)")),
        ]);
        let backend = server.backend();
        let response = backend
            .complete("prompt", &GenerationParams::new("gpt-4"))
            .unwrap();
        assert_eq!(response.attempt_count, 2);
        server.finish();
    }

    #[test]
    fn request_carries_greedy_decoding_by_default() {
        let server = ScriptedServer::start(vec![(200, ok_body("x"))]);
        let backend = server.backend();
        backend
            .complete("what is up", &GenerationParams::new("my-model"))
            .unwrap();
        let (_, bodies) = server.finish();
        let body: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["model"], "my-model");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "what is up");
    }

    #[test]
    fn empty_prompt_is_rejected_without_network() {
        let endpoint = EndpointConfig::new("http://127.0.0.1:1");
        let backend = HttpBackend::new(endpoint, RetryPolicy::default(), None).unwrap();
        assert!(matches!(
            backend.complete("  ", &GenerationParams::new("m")),
            Err(BackendError::EmptyPrompt)
        ));
    }

    #[test]
    fn missing_credential_is_reported() {
        let err = EndpointConfig::new("http://x")
            .with_key_from_env("FAIRAUDIT_TEST_UNSET_VAR")
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingCredential(_)));
        assert!(err.is_fatal());
    }
}
