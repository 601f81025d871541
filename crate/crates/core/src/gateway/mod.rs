//! Inference backends behind one interface, selected per message by `X-Hint-Model`.

mod http;
mod scripted;

pub use http::{chat_turns, ApiStyle, HttpBackend, HttpBackendConfig};
pub use scripted::{Respond, RuleMatch, ScriptRule, ScriptedBackend};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("backend id {0:?} is not of the form provider.model")]
    InvalidBackendId(String),
    #[error("backend {0} is already registered")]
    DuplicateBackend(BackendId),
    #[error("no backend named {0}")]
    UnknownBackend(BackendId),
    #[error("backend did not answer within {0:?}")]
    BackendTimeout(Duration),
    #[error("backend rejected the request: {0}")]
    BackendRejection(String),
    #[error("invalid script rules: {0}")]
    InvalidRules(String),
}

/// `provider.model`, e.g. `openai.gpt-4o`. The model part may itself contain dots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BackendId {
    pub provider: String,
    pub model: String,
}

impl BackendId {
    pub fn new(provider: &str, model: &str) -> Self {
        BackendId { provider: provider.to_string(), model: model.to_string() }
    }
}

impl FromStr for BackendId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GatewayError::InvalidBackendId(s.to_string());
        let (provider, model) = s.split_once('.').ok_or_else(bad)?;
        let token = |t: &str| !t.is_empty() && !t.chars().any(char::is_whitespace);
        if !token(provider) || !token(model) {
            return Err(bad());
        }
        Ok(BackendId::new(provider, model))
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.provider, self.model)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    /// Address of the agent the completion is for.
    pub agent: String,
    /// The numbered context, serialized as mbox text.
    pub rendered: String,
    pub backend: BackendId,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl CompletionRequest {
    pub fn new(agent: &str, rendered: String, backend: BackendId) -> Self {
        CompletionRequest { agent: agent.to_string(), rendered, backend, max_output_tokens: 4096, timeout: Duration::from_secs(120) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub raw_output: String,
    pub prompt_tokens: u64,
    /// Prompt plus completion.
    pub total_tokens: u64,
}

/// Token estimate used when a backend reports none: one token per four bytes, rounded up.
pub fn fallback_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

impl CompletionResult {
    /// Result whose token counts come from [`fallback_tokens`].
    pub fn estimated(prompt: &str, output: String) -> Self {
        let prompt_tokens = fallback_tokens(prompt);
        CompletionResult { total_tokens: prompt_tokens + fallback_tokens(&output), raw_output: output, prompt_tokens }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// Registry of named backends plus the default used when no hint is given.
#[derive(Clone)]
pub struct Gateway {
    backends: HashMap<BackendId, Arc<dyn Backend>>,
    default: BackendId,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ids: Vec<String> = self.backends.keys().map(|b| b.to_string()).collect();
        ids.sort();
        f.debug_struct("Gateway").field("backends", &ids).field("default", &self.default.to_string()).finish()
    }
}

impl Gateway {
    pub fn new(default_id: BackendId, default_backend: Arc<dyn Backend>) -> Self {
        let mut backends: HashMap<BackendId, Arc<dyn Backend>> = HashMap::new();
        backends.insert(default_id.clone(), default_backend);
        Gateway { backends, default: default_id }
    }

    pub fn register(&mut self, id: BackendId, backend: Arc<dyn Backend>) -> Result<(), GatewayError> {
        if self.backends.contains_key(&id) {
            return Err(GatewayError::DuplicateBackend(id));
        }
        self.backends.insert(id, backend);
        Ok(())
    }

    /// Makes an already registered backend the one used without a hint.
    pub fn set_default(&mut self, id: BackendId) -> Result<(), GatewayError> {
        if !self.backends.contains_key(&id) {
            return Err(GatewayError::UnknownBackend(id));
        }
        self.default = id;
        Ok(())
    }

    pub fn default_id(&self) -> &BackendId {
        &self.default
    }

    pub fn is_registered(&self, id: &BackendId) -> bool {
        self.backends.contains_key(id)
    }

    pub fn select(&self, hint: Option<&str>) -> Result<BackendId, GatewayError> {
        match hint.map(str::trim).filter(|h| !h.is_empty()) {
            None => Ok(self.default.clone()),
            Some(h) => {
                let id: BackendId = h.parse()?;
                if self.backends.contains_key(&id) {
                    Ok(id)
                } else {
                    Err(GatewayError::UnknownBackend(id))
                }
            }
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let backend = self.backends.get(&req.backend).ok_or_else(|| GatewayError::UnknownBackend(req.backend.clone()))?;
        backend.complete(req)
    }
}
