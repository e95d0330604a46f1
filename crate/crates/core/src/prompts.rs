//! System prompts for the three agents. The built-in set is compiled from
//! the versioned files under `prompts/`; a directory with the same file names
//! can override them.

use std::path::Path;

use crate::domain::AgentRole;

pub const PROMPT_VERSION: u32 = 1;

const ORCHESTRATOR: &str = include_str!("../prompts/orchestrator.v1.md");
const TEXT_AGENT: &str = include_str!("../prompts/text_agent.v1.md");
const CODE_AGENT: &str = include_str!("../prompts/code_agent.v1.md");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    pub orchestrator: String,
    pub text_agent: String,
    /// Template with `{assets_dir}` and `{data_dir}` placeholders.
    pub code_agent: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            orchestrator: ORCHESTRATOR.to_string(),
            text_agent: TEXT_AGENT.to_string(),
            code_agent: CODE_AGENT.to_string(),
        }
    }
}

impl Prompts {
    /// Loads `<role>.v<version>.md` files from `dir`, falling back to the
    /// built-in text for any file that is absent.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut prompts = Self::default();
        for (role, slot) in [
            (AgentRole::Orchestrator, &mut prompts.orchestrator),
            (AgentRole::TextAgent, &mut prompts.text_agent),
            (AgentRole::CodeAgent, &mut prompts.code_agent),
        ] {
            let path = dir.join(format!("{}.v{PROMPT_VERSION}.md", role.as_str()));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(prompts)
    }

    pub fn system_prompt(&self, role: AgentRole, assets_dir: &str, data_dir: &str) -> String {
        match role {
            AgentRole::Orchestrator => self.orchestrator.clone(),
            AgentRole::TextAgent => self.text_agent.clone(),
            AgentRole::CodeAgent => self
                .code_agent
                .replace("{assets_dir}", assets_dir)
                .replace("{data_dir}", data_dir),
        }
    }
}
