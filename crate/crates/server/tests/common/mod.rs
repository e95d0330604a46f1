#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

pub fn text_call(spec: &str) -> Value {
    json!({"tool_call": {"name": "request_text", "arguments": {"spec": spec}}})
}

pub fn code_call(purpose: &str) -> Value {
    json!({"tool_call": {"name": "request_code", "arguments": {"purpose": purpose}}})
}

pub fn finish_call(hint: &str) -> Value {
    json!({"tool_call": {"name": "finish", "arguments": {"summary_hint": hint}}})
}

/// Scripts for the three roles.
pub struct Scripts {
    pub orchestrator: Vec<Value>,
    pub text: Vec<Value>,
    pub code: Vec<Value>,
}

impl Scripts {
    /// Text, `print('hello')`, finish.
    pub fn three_action() -> Self {
        Self {
            orchestrator: vec![
                text_call("Outline the plan."),
                code_call("Print a greeting."),
                finish_call("Done."),
            ],
            text: vec![json!("1. Print a greeting.\n2. Finish.")],
            code: vec![json!("print('hello')")],
        }
    }
}

/// Writes scripts, a service config using the local interpreter and a
/// spec file into `dir`. `extra` is appended to the config verbatim.
pub fn write_fixture(dir: &Path, scripts: &Scripts, extra: &str) -> (PathBuf, PathBuf) {
    for (name, script) in [
        ("orchestrator.json", &scripts.orchestrator),
        ("text.json", &scripts.text),
        ("code.json", &scripts.code),
    ] {
        fs::write(dir.join(name), serde_json::to_string_pretty(script).unwrap()).unwrap();
    }
    let config = dir.join("nbagent.toml");
    fs::write(
        &config,
        format!(
            r#"listen = "127.0.0.1:0"
assets_root = "assets"

[sandbox]
kind = "local"

[backends.orchestrator]
kind = "scripted"
script = "orchestrator.json"

[backends.text_agent]
kind = "scripted"
script = "text.json"

[backends.code_agent]
kind = "scripted"
script = "code.json"
{extra}"#
        ),
    )
    .unwrap();
    let spec = dir.join("spec.toml");
    fs::write(
        &spec,
        "[general_instructions]\n\"Estimated steps\" = \"3\"\n\n[task]\ntask_description = \"Say hello.\"\nmetrics = \"None.\"\n",
    )
    .unwrap();
    (config, spec)
}
