use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatRequest, LlmError, Transport, TransportError};

/// OpenAI-compatible chat-completions transport.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: String,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl HttpProvider {
    /// Reads the API key from the environment variable `api_key_env`.
    pub fn from_env(
        endpoint: &str,
        model: &str,
        temperature: f64,
        api_key_env: &str,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let api_key = std::env::var(api_key_env).map_err(|_| LlmError::MissingApiKey(api_key_env.to_string()))?;
        Self::with_key(endpoint, model, temperature, api_key, timeout)
    }

    pub fn with_key(
        endpoint: &str,
        model: &str,
        temperature: f64,
        api_key: String,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpProvider {
            client,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            temperature,
            api_key,
        })
    }
}

impl Transport for HttpProvider {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": req.prompt.system},
                {"role": "user", "content": req.prompt.user},
            ],
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError::Retryable(e.without_url().to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| TransportError::Fatal(format!("malformed response body: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }

    fn is_live(&self) -> bool {
        true
    }
}
