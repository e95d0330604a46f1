//! Service configuration, read from a TOML file.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! assets_root = "assets"
//!
//! [sandbox]
//! kind = "docker"
//! image = "nbagent-python:1"
//!
//! [backends.orchestrator]
//! kind = "openai"
//! base_url = "https://api.openai.com/v1"
//! model_id = "gpt-4o"
//! credential_env = "OPENAI_API_KEY"
//!
//! [defaults]
//! max_steps = 30
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use nbagent_core::domain::{AgentRole, RunConfig, ToolMode};
use nbagent_core::gateway::{ChatBackend, Gateway, OpenAiCompatibleBackend, ScriptedBackend, ScriptedResponse};
use nbagent_core::sandbox::RuntimeSpec;
use serde::{Deserialize, Serialize};

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_assets_root() -> PathBuf {
    PathBuf::from("assets")
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_assets_root")]
    pub assets_root: PathBuf,
    pub sandbox: RuntimeSpec,
    pub backends: Backends,
    #[serde(default)]
    pub defaults: RunConfig,
    /// Directory overriding the built-in system prompts.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

/// One backend per role. All three are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backends {
    pub orchestrator: BackendDef,
    pub text_agent: BackendDef,
    pub code_agent: BackendDef,
}

impl Backends {
    pub fn get(&self, role: AgentRole) -> &BackendDef {
        match role {
            AgentRole::Orchestrator => &self.orchestrator,
            AgentRole::TextAgent => &self.text_agent,
            AgentRole::CodeAgent => &self.code_agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendDef {
    /// Any server speaking the OpenAI chat-completions protocol.
    Openai {
        base_url: String,
        model_id: String,
        /// Name of the environment variable holding the API key.
        #[serde(default)]
        credential_env: Option<String>,
        #[serde(default)]
        tool_mode: Option<ToolMode>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
    /// Replays a JSON array of canned replies, for tests and demos.
    Scripted {
        script: PathBuf,
        #[serde(default)]
        tool_mode: Option<ToolMode>,
    },
}

impl BackendDef {
    pub fn model_id(&self) -> &str {
        match self {
            BackendDef::Openai { model_id, .. } => model_id,
            BackendDef::Scripted { .. } => "scripted",
        }
    }

    pub fn tool_mode(&self) -> Option<ToolMode> {
        match self {
            BackendDef::Openai { tool_mode, .. } | BackendDef::Scripted { tool_mode, .. } => *tool_mode,
        }
    }
}

impl ServiceConfig {
    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: ServiceConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.assets_root);
        if let Some(dir) = self.prompts_dir.as_mut() {
            fix(dir);
        }
        for def in [
            &mut self.backends.orchestrator,
            &mut self.backends.text_agent,
            &mut self.backends.code_agent,
        ] {
            if let BackendDef::Scripted { script, .. } = def {
                fix(script);
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.defaults.validate().context("invalid [defaults]")?;
        for role in AgentRole::ALL {
            if let BackendDef::Openai { base_url, .. } = self.backends.get(role) {
                if url_scheme(base_url).is_none() {
                    bail!("backends.{}.base_url is not an http(s) URL: {base_url}", role.as_str());
                }
            }
        }
        Ok(())
    }

    /// The run config new sessions start from: the configured defaults with
    /// model ids and tool mode taken from the backend definitions where the
    /// defaults leave them open.
    pub fn session_defaults(&self) -> RunConfig {
        let mut config = self.defaults.clone();
        for (role, settings) in [
            (AgentRole::Orchestrator, &mut config.agents.orchestrator),
            (AgentRole::TextAgent, &mut config.agents.text),
            (AgentRole::CodeAgent, &mut config.agents.code),
        ] {
            if settings.model_id.is_empty() {
                settings.model_id = self.backends.get(role).model_id().to_string();
            }
        }
        if let Some(mode) = self.backends.orchestrator.tool_mode() {
            config.tool_mode = mode;
        }
        config
    }

    /// Instantiates the backend defined for `role`. Scripted backends are
    /// created fresh on every call, so each session replays its script
    /// from the start.
    pub fn backend(&self, role: AgentRole) -> anyhow::Result<Arc<dyn ChatBackend>> {
        let id = role.as_str();
        Ok(match self.backends.get(role) {
            BackendDef::Openai {
                base_url,
                model_id,
                credential_env,
                timeout_secs,
                ..
            } => Arc::new(
                OpenAiCompatibleBackend::new(
                    base_url,
                    model_id,
                    credential_env.clone(),
                    Duration::from_secs(*timeout_secs),
                )
                .with_context(|| format!("backends.{id}"))?,
            ),
            BackendDef::Scripted { script, .. } => {
                let text = fs::read_to_string(script)
                    .with_context(|| format!("backends.{id}: reading {}", script.display()))?;
                let responses: Vec<ScriptedResponse> = serde_json::from_str(&text)
                    .with_context(|| format!("backends.{id}: parsing {}", script.display()))?;
                Arc::new(ScriptedBackend::new(responses).with_context(|| format!("backends.{id}"))?)
            }
        })
    }

    /// A gateway routing each role to its own backend, registered under
    /// the role's name.
    pub fn build_gateway(&self) -> anyhow::Result<Arc<Gateway>> {
        let gateway = Gateway::new();
        for role in AgentRole::ALL {
            gateway.register(role.as_str(), self.backend(role)?);
            gateway.route(role, role.as_str());
        }
        Ok(Arc::new(gateway))
    }
}

fn url_scheme(raw: &str) -> Option<&str> {
    let (scheme, rest) = raw.split_once("://")?;
    (matches!(scheme, "http" | "https") && !rest.is_empty()).then_some(scheme)
}
