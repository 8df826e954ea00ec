use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub noise_scale: f64,
    /// Probability of a refusal on the first attempt.
    pub refusal_rate: f64,
    /// Probability of a refusal on the retry.
    pub retry_refusal_rate: f64,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            noise_scale: 1.0,
            refusal_rate: 0.0,
            retry_refusal_rate: 0.0,
            seed: 0,
        }
    }
}

/// Test double for a chat model. The chance of picking the first-shown unit
/// is `logistic((latent_first - latent_second) / noise_scale)`. All draws are
/// hashed from `(seed, units, question, attempt)`, so answers do not depend on
/// call order or concurrency.
#[derive(Debug, Clone)]
pub struct MockProvider {
    /// Latent scores by name (a quality, a question id, or "default").
    latents: BTreeMap<String, HashMap<String, f64>>,
    config: MockConfig,
}

pub const DEFAULT_LATENT: &str = "default";

impl MockProvider {
    pub fn new(latent: HashMap<String, f64>, config: MockConfig) -> Self {
        let mut latents = BTreeMap::new();
        latents.insert(DEFAULT_LATENT.to_string(), latent);
        MockProvider { latents, config }
    }

    /// Adds a latent used for the question or quality called `name`.
    pub fn with_latent(mut self, name: impl Into<String>, latent: HashMap<String, f64>) -> Self {
        self.latents.insert(name.into(), latent);
        self
    }

    fn latent_for(&self, key: &str, question: &str) -> &HashMap<String, f64> {
        self.latents
            .get(key)
            .or_else(|| self.latents.get(question))
            .or_else(|| self.latents.get(DEFAULT_LATENT))
            .expect("mock provider always holds a default latent")
    }

    fn uniform(&self, tag: &str, req: &ChatRequest, key: &str) -> f64 {
        let mut h = Sha256::new();
        h.update(self.config.seed.to_le_bytes());
        for part in [tag, &req.prompt.first_id, &req.prompt.second_id, &req.prompt.question_id, key] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        h.update([req.attempt]);
        let digest = h.finalize();
        let bits = u64::from_le_bytes(digest[..8].try_into().unwrap()) >> 11;
        bits as f64 / (1u64 << 53) as f64
    }

    fn pick(&self, req: &ChatRequest, key: &str) -> Result<u8, TransportError> {
        let latent = self.latent_for(key, &req.prompt.question_id);
        let score = |id: &str| {
            latent
                .get(id)
                .copied()
                .ok_or_else(|| TransportError::Fatal(format!("unit `{id}` has no latent score")))
        };
        let diff = score(&req.prompt.first_id)? - score(&req.prompt.second_id)?;
        let p_first = if self.config.noise_scale <= 0.0 {
            match diff.partial_cmp(&0.0) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Less) => 0.0,
                _ => 0.5,
            }
        } else {
            1.0 / (1.0 + (-diff / self.config.noise_scale).exp())
        };
        Ok(if self.uniform("choose", req, key) < p_first { 1 } else { 2 })
    }
}

impl Transport for MockProvider {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let rate = if req.attempt <= 1 {
            self.config.refusal_rate
        } else {
            self.config.retry_refusal_rate
        };
        if self.uniform("refuse", req, "") < rate {
            return Ok("Neither".to_string());
        }
        if req.prompt.qualities.is_empty() {
            let k = self.pick(req, &req.prompt.question_id)?;
            Ok(format!("Observation {k}"))
        } else {
            let mut lines = Vec::with_capacity(req.prompt.qualities.len());
            for (i, q) in req.prompt.qualities.iter().enumerate() {
                lines.push(format!("{}: Paper {}", i + 1, self.pick(req, q)?));
            }
            Ok(lines.join("\n"))
        }
    }

    fn is_live(&self) -> bool {
        false
    }
}
