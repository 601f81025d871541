//! OpenAI-compatible HTTP backend (`/chat/completions` or `/completions`).

use serde::Deserialize;
use serde_json::{json, Value};

use super::{fallback_tokens, Backend, CompletionRequest, CompletionResult, GatewayError};
use crate::address::address_key;
use crate::message::parse_mbox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiStyle {
    #[default]
    Chat,
    Completion,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HttpBackendConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    /// Model name sent to the provider.
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub style: ApiStyle,
    /// Optional leading system turn for chat requests.
    #[serde(default)]
    pub system_prompt: Option<String>,
}

/// URL problems surface on the first `complete`, not at construction.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    cfg: HttpBackendConfig,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        HttpBackend { cfg }
    }

    fn endpoint(&self) -> Result<reqwest::Url, GatewayError> {
        let path = match self.cfg.style {
            ApiStyle::Chat => "chat/completions",
            ApiStyle::Completion => "completions",
        };
        let base = format!("{}/", self.cfg.base_url.trim_end_matches('/'));
        let url = reqwest::Url::parse(&base).and_then(|u| u.join(path)).map_err(|e| GatewayError::BackendRejection(format!("bad url {:?}: {e}", self.cfg.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(GatewayError::BackendRejection(format!("unsupported scheme {:?}", url.scheme())));
        }
        Ok(url)
    }

    fn payload(&self, req: &CompletionRequest) -> Result<Value, GatewayError> {
        Ok(match self.cfg.style {
            ApiStyle::Chat => {
                let mut turns: Vec<Value> = Vec::new();
                if let Some(sys) = &self.cfg.system_prompt {
                    turns.push(json!({"role": "system", "content": sys}));
                }
                for (role, content) in chat_turns(&req.agent, &req.rendered)? {
                    turns.push(json!({"role": role, "content": content}));
                }
                json!({"model": self.cfg.model, "messages": turns, "max_tokens": req.max_output_tokens})
            }
            ApiStyle::Completion => json!({"model": self.cfg.model, "prompt": req.rendered, "max_tokens": req.max_output_tokens}),
        })
    }
}

/// Maps a rendered context to chat turns: the agent's own messages become
/// `assistant` turns, everything else a `user` turn. Each turn carries the
/// full mbox text of its message so headers such as `X-Serial` stay visible.
pub fn chat_turns(agent: &str, rendered: &str) -> Result<Vec<(&'static str, String)>, GatewayError> {
    let msgs = parse_mbox(rendered.as_bytes()).map_err(|e| GatewayError::BackendRejection(e.to_string()))?;
    let me = address_key(agent);
    Ok(msgs
        .iter()
        .map(|m| {
            let role = if m.from_addr().map(address_key).as_deref() == Some(me.as_str()) { "assistant" } else { "user" };
            (role, m.to_mbox())
        })
        .collect())
}

fn extract(style: ApiStyle, body: &Value) -> Option<String> {
    let choice = body.get("choices")?.get(0)?;
    let text = match style {
        ApiStyle::Chat => choice.get("message")?.get("content")?,
        ApiStyle::Completion => choice.get("text")?,
    };
    text.as_str().map(str::to_string)
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let url = self.endpoint()?;
        let payload = self.payload(req)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(req.timeout)
            .build()
            .map_err(|e| GatewayError::BackendRejection(e.to_string()))?;
        let mut call = client.post(url).json(&payload);
        if let Some(key) = &self.cfg.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::BackendTimeout(req.timeout)
            } else {
                GatewayError::BackendRejection(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::BackendTimeout(req.timeout)
            } else {
                GatewayError::BackendRejection(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(GatewayError::BackendRejection(format!("{status}: {text}")));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| GatewayError::BackendRejection(format!("invalid response: {e}")))?;
        let output = extract(self.cfg.style, &body).ok_or_else(|| GatewayError::BackendRejection(format!("no completion in response: {text}")))?;

        let usage = body.get("usage");
        let field = |name: &str| usage.and_then(|u| u.get(name)).and_then(Value::as_u64);
        let prompt_tokens = field("prompt_tokens").unwrap_or_else(|| fallback_tokens(&req.rendered));
        let total_tokens = field("total_tokens")
            .unwrap_or_else(|| prompt_tokens + field("completion_tokens").unwrap_or_else(|| fallback_tokens(&output)));
        Ok(CompletionResult { raw_output: output, prompt_tokens, total_tokens })
    }
}
