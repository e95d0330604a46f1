//! Chat-completion gateway. Each agent role is routed to a registered
//! backend: an OpenAI-compatible HTTP endpoint (hosted or local) or a
//! scripted queue used for deterministic runs.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use crate::domain::AgentRole;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error{}: {body}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, body: String },
    #[error("script must contain at least one response")]
    EmptyScript,
    #[error("no backend registered for {0}")]
    NoBackend(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub role: AgentRole,
    pub model_id: String,
    pub system_prompt: String,
    pub rendered_context: String,
    /// The per-call task (spec, purpose, rewrite request) placed after the
    /// shared context.
    pub instruction: String,
    /// Tool definitions forcing a structured routing decision. Only set for
    /// the orchestrator in native tool-call mode.
    pub structured_schema: Option<Value>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user_message(&self) -> String {
        if self.instruction.is_empty() {
            self.rendered_context.clone()
        } else {
            format!("{}\n\n{}", self.rendered_context, self.instruction)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments_json: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub raw_text: String,
    pub native_tool_call: Option<ToolCall>,
    pub model_id: String,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn is_empty(&self) -> bool {
        self.raw_text.trim().is_empty() && self.native_tool_call.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub backend_id: String,
    pub reachable: bool,
    /// `None` when the backend could not be reached.
    pub auth: Option<bool>,
    pub latency_ms: Option<u64>,
    pub detail: String,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
    fn diagnose(&self, backend_id: &str) -> DiagnosticReport;
}

/// An OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct OpenAiCompatibleBackend {
    base_url: String,
    default_model: String,
    credential_env: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatibleBackend {
    pub fn new(
        base_url: impl Into<String>,
        default_model: impl Into<String>,
        credential_env: Option<String>,
        deadline: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(deadline)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            default_model: default_model.into(),
            credential_env,
            client,
        })
    }

    fn credential(&self) -> Result<Option<String>, GatewayError> {
        match &self.credential_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(value) if !value.is_empty() => Ok(Some(value)),
                _ => Err(GatewayError::Auth(format!("environment variable {var} is not set"))),
            },
        }
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let model = if request.model_id.is_empty() {
            &self.default_model
        } else {
            &request.model_id
        };
        let mut body = json!({
            "model": model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_message()},
            ],
        });
        if let Some(tools) = &request.structured_schema {
            body["tools"] = tools.clone();
            body["tool_choice"] = json!("required");
        }
        body
    }

    fn send(
        &self,
        build: impl Fn() -> reqwest::blocking::RequestBuilder,
    ) -> Result<reqwest::blocking::Response, GatewayError> {
        match build().send() {
            Ok(resp) => Ok(resp),
            // One reconnect; anything beyond is the caller's policy.
            Err(e) if e.is_connect() => build().send().map_err(|e| GatewayError::Transport(e.to_string())),
            Err(e) => Err(GatewayError::Transport(e.to_string())),
        }
    }
}

impl ChatBackend for OpenAiCompatibleBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let token = self.credential()?;
        let body = self.body(request);
        let url = format!("{}/chat/completions", self.base_url);
        let started = Instant::now();
        let resp = self.send(|| {
            let builder = self.client.post(&url).json(&body);
            match &token {
                Some(token) => builder.bearer_auth(token),
                None => builder,
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(GatewayError::Auth(format!("HTTP {}: {text}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(GatewayError::Backend {
                status: Some(status.as_u16()),
                body: text,
            });
        }
        let latency_ms = started.elapsed().as_millis() as u64;
        parse_completion(&text, latency_ms)
    }

    fn diagnose(&self, backend_id: &str) -> DiagnosticReport {
        let token = self.credential();
        let url = format!("{}/models", self.base_url);
        let started = Instant::now();
        let result = self.send(|| {
            let builder = self.client.get(&url);
            match &token {
                Ok(Some(token)) => builder.bearer_auth(token),
                _ => builder,
            }
        });
        let latency_ms = started.elapsed().as_millis() as u64;
        match result {
            Err(e) => DiagnosticReport {
                backend_id: backend_id.to_string(),
                reachable: false,
                auth: None,
                latency_ms: None,
                detail: e.to_string(),
            },
            Ok(resp) => {
                let code = resp.status().as_u16();
                let (auth, detail) = match &token {
                    Err(e) => (false, e.to_string()),
                    Ok(_) if code == 401 || code == 403 => (false, format!("HTTP {code}")),
                    Ok(_) => (true, format!("HTTP {code}")),
                };
                DiagnosticReport {
                    backend_id: backend_id.to_string(),
                    reachable: true,
                    auth: Some(auth),
                    latency_ms: Some(latency_ms),
                    detail,
                }
            }
        }
    }
}

fn parse_completion(body: &str, latency_ms: u64) -> Result<ChatResponse, GatewayError> {
    let malformed = |why: &str| GatewayError::Backend {
        status: None,
        body: format!("{why}: {body}"),
    };
    let value: Value = serde_json::from_str(body).map_err(|_| malformed("response is not JSON"))?;
    let message = value
        .pointer("/choices/0/message")
        .ok_or_else(|| malformed("response has no choices[0].message"))?;
    let raw_text = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let native_tool_call = message.pointer("/tool_calls/0/function").and_then(|f| {
        let name = f.get("name")?.as_str()?.to_string();
        let arguments_json = match f.get("arguments")? {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        Some(ToolCall { name, arguments_json })
    });
    let response = ChatResponse {
        raw_text,
        native_tool_call,
        model_id: value
            .get("model")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        latency_ms,
    };
    if response.is_empty() {
        return Err(malformed("completion carries neither content nor a tool call"));
    }
    Ok(response)
}

/// One canned reply of a scripted backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedResponse {
    Text(String),
    ToolCall { tool_call: ScriptedToolCall },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

impl ScriptedResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedResponse::Text(text.into())
    }

    pub fn tool_call(name: impl Into<String>, arguments: Value) -> Self {
        ScriptedResponse::ToolCall {
            tool_call: ScriptedToolCall {
                name: name.into(),
                arguments,
            },
        }
    }
}

/// Replays a fixed list of responses in order, then fails.
#[derive(Debug)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<ScriptedResponse>>,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<ScriptedResponse>) -> Result<Self, GatewayError> {
        if responses.is_empty() {
            return Err(GatewayError::EmptyScript);
        }
        Ok(Self {
            queue: Mutex::new(responses.into()),
        })
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script lock").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let next = self.queue.lock().expect("script lock").pop_front();
        let next = next.ok_or_else(|| GatewayError::Backend {
            status: None,
            body: "script exhausted".into(),
        })?;
        let (raw_text, native_tool_call) = match next {
            ScriptedResponse::Text(text) => (text, None),
            ScriptedResponse::ToolCall { tool_call } => {
                let arguments_json = match tool_call.arguments {
                    Value::String(s) => s,
                    Value::Null => "{}".to_string(),
                    other => other.to_string(),
                };
                (
                    String::new(),
                    Some(ToolCall {
                        name: tool_call.name,
                        arguments_json,
                    }),
                )
            }
        };
        Ok(ChatResponse {
            raw_text,
            native_tool_call,
            model_id: if request.model_id.is_empty() {
                "scripted".into()
            } else {
                request.model_id.clone()
            },
            latency_ms: 0,
        })
    }

    fn diagnose(&self, backend_id: &str) -> DiagnosticReport {
        DiagnosticReport {
            backend_id: backend_id.to_string(),
            reachable: true,
            auth: Some(true),
            latency_ms: Some(0),
            detail: format!("scripted, {} responses left", self.remaining()),
        }
    }
}

/// Backend registry plus the role routing table.
#[derive(Default)]
pub struct Gateway {
    backends: RwLock<HashMap<String, Arc<dyn ChatBackend>>>,
    routes: RwLock<HashMap<AgentRole, String>>,
    scripted_seq: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("routes", &*self.routes.read().expect("routes lock"))
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, backend_id: impl Into<String>, backend: Arc<dyn ChatBackend>) {
        self.backends
            .write()
            .expect("backends lock")
            .insert(backend_id.into(), backend);
    }

    pub fn route(&self, role: AgentRole, backend_id: impl Into<String>) {
        self.routes
            .write()
            .expect("routes lock")
            .insert(role, backend_id.into());
    }

    /// Registers a scripted backend and returns its id.
    pub fn script_backend(&self, responses: Vec<ScriptedResponse>) -> Result<String, GatewayError> {
        let backend = ScriptedBackend::new(responses)?;
        let id = format!("scripted-{}", self.scripted_seq.fetch_add(1, Ordering::SeqCst) + 1);
        self.register(id.clone(), Arc::new(backend));
        Ok(id)
    }

    pub fn backend_for(&self, role: AgentRole) -> Result<(String, Arc<dyn ChatBackend>), GatewayError> {
        let id = self
            .routes
            .read()
            .expect("routes lock")
            .get(&role)
            .cloned()
            .ok_or_else(|| GatewayError::NoBackend(role.as_str().to_string()))?;
        let backend = self
            .backends
            .read()
            .expect("backends lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| GatewayError::NoBackend(id.clone()))?;
        Ok((id, backend))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let (_, backend) = self.backend_for(request.role)?;
        backend.complete(request)
    }

    pub fn diagnose(&self, backend_id: &str) -> DiagnosticReport {
        let backend = self.backends.read().expect("backends lock").get(backend_id).cloned();
        match backend {
            Some(backend) => backend.diagnose(backend_id),
            None => DiagnosticReport {
                backend_id: backend_id.to_string(),
                reachable: false,
                auth: None,
                latency_ms: None,
                detail: "no such backend".into(),
            },
        }
    }

    pub fn backend_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.backends.read().expect("backends lock").keys().cloned().collect();
        ids.sort();
        ids
    }
}
