//! Pairwise prompts, verdict parsing and providers (mock or HTTP chat), with
//! a response cache, rate limiting and bounded concurrency.

mod cache;
mod http;
mod mock;
mod parse;
mod prompt;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, Cache, CacheRecord};
pub use http::HttpProvider;
pub use mock::{MockConfig, MockProvider, DEFAULT_LATENT};
pub use parse::{parse_multi, parse_single, ParseOptions};
pub use prompt::{PromptTemplate, QuestionMode, QuestionSpec, RenderedPrompt};


use crate::dataset::Unit;
use crate::pairing::{PairComparison, PairPlan, Verdict};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no sentence template for covariate `{0}`")]
    MissingTemplate(String),
    #[error("invalid question: {0}")]
    Question(String),
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("live provider calls require --live")]
    LiveNotAllowed,
    #[error("transport failed after {attempts} tries: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("plan references question `{0}` with no specification")]
    UnknownQuestion(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Failures reported by or on the way to the provider, as opposed to
    /// local configuration problems.
    pub fn is_provider(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Provider(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Network failure, throttling or a server error.
    Retryable(String),
    Fatal(String),
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub prompt: RenderedPrompt,
    /// 1 for the first ask, 2 for the retry after a refusal.
    pub attempt: u8,
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
    fn is_live(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<f64>,
    pub temperature: f64,
    pub max_transport_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Covariate column holding the mock's latent score.
    pub mock_latent_column: Option<String>,
    pub mock: MockConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_in_flight: 4,
            requests_per_minute: None,
            temperature: 0.0,
            max_transport_retries: 4,
            backoff_ms: 500,
            timeout_secs: 60,
            mock_latent_column: None,
            mock: MockConfig::default(),
        }
    }
}

/// Token bucket refilled at `requests_per_minute / 60` tokens per second.
#[derive(Debug)]
pub struct RateLimiter {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: f64, burst: usize) -> Self {
        let capacity = (burst.max(1) as f64).min(requests_per_minute.max(1.0));
        RateLimiter {
            rate_per_sec: requests_per_minute / 60.0,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate_per_sec;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.rate_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Result of one ask: a verdict per scoring key.
#[derive(Debug, Clone, PartialEq)]
pub struct AskOutcome {
    pub key: String,
    pub verdicts: Vec<(String, Verdict)>,
    pub attempts: u8,
    pub from_cache: bool,
}

pub struct Client {
    transport: Arc<dyn Transport>,
    model: String,
    cache: Cache,
    limiter: Option<RateLimiter>,
    max_in_flight: usize,
    max_transport_retries: u32,
    backoff: Duration,
    parse: ParseOptions,
    transport_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Client {
    /// Refuses live transports unless `allow_live` is set.
    pub fn new(transport: Arc<dyn Transport>, model: &str, cache: Cache, allow_live: bool) -> Result<Self, LlmError> {
        if transport.is_live() && !allow_live {
            return Err(LlmError::LiveNotAllowed);
        }
        Ok(Client {
            transport,
            model: model.to_string(),
            cache,
            limiter: None,
            max_in_flight: 1,
            max_transport_retries: 4,
            backoff: Duration::from_millis(500),
            parse: ParseOptions::default(),
            transport_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: Option<f64>) -> Self {
        self.limiter = requests_per_minute
            .filter(|r| *r > 0.0)
            .map(|r| RateLimiter::new(r, self.max_in_flight));
        self
    }

    pub fn with_retry(mut self, max_transport_retries: u32, backoff: Duration) -> Self {
        self.max_transport_retries = max_transport_retries;
        self.backoff = backoff;
        self
    }

    pub fn with_parse_options(mut self, parse: ParseOptions) -> Self {
        self.parse = parse;
        self
    }

    /// Applies the concurrency, rate and retry settings of `config`.
    pub fn configured(self, config: &ProviderConfig) -> Self {
        self.with_max_in_flight(config.max_in_flight)
            .with_rate_limit(config.requests_per_minute)
            .with_retry(config.max_transport_retries, Duration::from_millis(config.backoff_ms))
    }

    pub fn transport_calls(&self) -> usize {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut tries = 0;
        loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            tries += 1;
            self.transport_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.send(request) {
                Ok(text) => return Ok(text),
                Err(TransportError::Fatal(message)) => return Err(LlmError::Provider(message)),
                Err(TransportError::Retryable(message)) => {
                    if tries > self.max_transport_retries {
                        return Err(LlmError::Transport {
                            attempts: tries,
                            message,
                        });
                    }
                    log::warn!("transport error (try {tries}): {message}; backing off");
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(tries - 1));
                }
            }
        }
    }

    fn parse(&self, prompt: &RenderedPrompt, raw: &str) -> Vec<Verdict> {
        if prompt.qualities.is_empty() {
            vec![parse_single(raw, self.parse)]
        } else {
            parse_multi(raw, &prompt.qualities, self.parse)
        }
    }

    fn refused(verdicts: &[Verdict]) -> bool {
        verdicts.iter().all(|v| *v == Verdict::Invalid)
    }

    /// Consults the cache, then asks the provider, retrying the identical
    /// prompt once after a refusal or unparseable answer.
    pub fn ask(&self, prompt: &RenderedPrompt, score_keys: &[String]) -> Result<AskOutcome, LlmError> {
        let key = cache_key(&self.model, prompt);
        let (responses, from_cache) = match self.cache.get(&key) {
            Some(record) => {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                (record.responses, true)
            }
            None => {
                let mut responses = Vec::with_capacity(2);
                for attempt in 1..=2u8 {
                    let request = ChatRequest {
                        prompt: prompt.clone(),
                        attempt,
                    };
                    let raw = self.send(&request)?;
                    let done = !Self::refused(&self.parse(prompt, &raw));
                    responses.push(raw);
                    if done {
                        break;
                    }
                }
                self.cache
                    .insert(CacheRecord::new(key.clone(), &self.model, prompt, responses.clone()))?;
                (responses, false)
            }
        };
        let verdicts = self.parse(prompt, responses.last().map(String::as_str).unwrap_or_default());
        Ok(AskOutcome {
            key,
            verdicts: score_keys.iter().cloned().zip(verdicts).collect(),
            attempts: responses.len() as u8,
            from_cache,
        })
    }

    /// Runs every (pair, question) of the plan with up to `max_in_flight`
    /// concurrent asks. Comparisons come back sorted by pair and question,
    /// whatever order the answers arrived in.
    pub fn run_plan(
        &self,
        plan: &PairPlan,
        units: &[Unit],
        questions: &[QuestionSpec],
        template: &PromptTemplate,
    ) -> Result<Vec<PairComparison>, LlmError> {
        let by_id: HashMap<&str, &QuestionSpec> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
        let mut jobs = Vec::with_capacity(plan.pairs.len() * plan.questions.len());
        for pair in &plan.pairs {
            let (first, second) = pair.shown();
            for qid in &plan.questions {
                let q = by_id.get(qid.as_str()).ok_or_else(|| LlmError::UnknownQuestion(qid.clone()))?;
                let prompt = template.render(q, &units[first], &units[second])?;
                jobs.push((pair.index, prompt, q.score_keys()));
            }
        }
        let results: Vec<Mutex<Option<Result<AskOutcome, LlmError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let workers = self.max_in_flight.min(jobs.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    let Some((_, prompt, keys)) = jobs.get(j) else {
                        break;
                    };
                    let outcome = self.ask(prompt, keys);
                    if outcome.is_err() {
                        failed.store(true, Ordering::SeqCst);
                    }
                    *results[j].lock().unwrap() = Some(outcome);
                });
            }
        });
        let mut comparisons = Vec::new();
        for ((pair, _, _), slot) in jobs.iter().zip(results) {
            let Some(outcome) = slot.into_inner().unwrap() else {
                continue;
            };
            let outcome = outcome?;
            for (question, verdict) in outcome.verdicts {
                comparisons.push(PairComparison {
                    pair: *pair,
                    question,
                    verdict,
                    attempts: outcome.attempts,
                    raw: Some(outcome.key.clone()),
                });
            }
        }
        comparisons.sort_by(|a, b| a.pair.cmp(&b.pair).then_with(|| a.question.cmp(&b.question)));
        Ok(comparisons)
    }
}
