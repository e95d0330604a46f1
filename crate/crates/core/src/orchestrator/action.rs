//! The routing-decision schema and its parser.

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::domain::{OrchestratorAction, ToolMode};
use crate::gateway::ChatResponse;

pub const ACTION_NAMES: [&str; 3] = ["request_text", "request_code", "finish"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("missing field {field:?} for action {action:?}")]
    MissingField { action: String, field: &'static str },
    #[error("unexpected field {field:?} for action {action:?}")]
    UnknownField { action: String, field: String },
    #[error("field {field:?} must be {expected}")]
    InvalidField { field: String, expected: &'static str },
    #[error("no JSON object found in the response")]
    NoJsonFound,
    #[error("expected a native tool call but the response has none")]
    MissingToolCall,
    #[error("tool call arguments are not a JSON object: {0}")]
    MalformedArguments(String),
    #[error("response is empty")]
    EmptyResponse,
}

/// Parses and validates one orchestrator reply.
pub fn parse_action(raw: &ChatResponse, mode: ToolMode) -> Result<OrchestratorAction, ActionError> {
    if raw.is_empty() {
        return Err(ActionError::EmptyResponse);
    }
    match mode {
        ToolMode::NativeToolCalls => match &raw.native_tool_call {
            Some(call) => action_from_tool_call(&call.name, &call.arguments_json),
            None => Err(ActionError::MissingToolCall),
        },
        ToolMode::EmulatedJson => match first_json_object(&raw.raw_text) {
            Some(object) => validate_action_object(&object),
            None => match &raw.native_tool_call {
                Some(call) => action_from_tool_call(&call.name, &call.arguments_json),
                None => Err(ActionError::NoJsonFound),
            },
        },
    }
}

fn action_from_tool_call(name: &str, arguments_json: &str) -> Result<OrchestratorAction, ActionError> {
    let arguments: Value = if arguments_json.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(arguments_json).map_err(|e| ActionError::MalformedArguments(e.to_string()))?
    };
    let Value::Object(mut object) = arguments else {
        return Err(ActionError::MalformedArguments(arguments_json.to_string()));
    };
    match object.get("action") {
        None => {
            object.insert("action".into(), Value::String(name.to_string()));
        }
        Some(Value::String(inner)) if inner == name => {}
        Some(_) => {
            return Err(ActionError::InvalidField {
                field: "action".into(),
                expected: "equal to the tool name",
            })
        }
    }
    validate_action_object(&Value::Object(object))
}

/// Checks a decoded object against the action schema.
pub fn validate_action_object(value: &Value) -> Result<OrchestratorAction, ActionError> {
    let Value::Object(object) = value else {
        return Err(ActionError::InvalidField {
            field: String::new(),
            expected: "a JSON object",
        });
    };
    let action = match object.get("action") {
        Some(Value::String(name)) => name.as_str(),
        Some(_) => {
            return Err(ActionError::InvalidField {
                field: "action".into(),
                expected: "a string",
            })
        }
        None => {
            return Err(ActionError::MissingField {
                action: String::new(),
                field: "action",
            })
        }
    };
    let allowed: &[&str] = match action {
        "request_text" => &["action", "spec"],
        "request_code" => &["action", "purpose"],
        // "purpose" is the legacy spelling of summary_hint.
        "finish" => &["action", "summary_hint", "purpose"],
        other => return Err(ActionError::UnknownAction(other.to_string())),
    };
    if let Some(extra) = object.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ActionError::UnknownField {
            action: action.to_string(),
            field: extra.clone(),
        });
    }
    let required = |field: &'static str| -> Result<String, ActionError> {
        match object.get(field) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(Value::String(_)) | None | Some(Value::Null) => Err(ActionError::MissingField {
                action: action.to_string(),
                field,
            }),
            Some(_) => Err(ActionError::InvalidField {
                field: field.to_string(),
                expected: "a string",
            }),
        }
    };
    let optional = |field: &str| -> Result<Option<String>, ActionError> {
        match object.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(ActionError::InvalidField {
                field: field.to_string(),
                expected: "a string or null",
            }),
        }
    };
    match action {
        "request_text" => Ok(OrchestratorAction::RequestText {
            spec: required("spec")?,
        }),
        "request_code" => Ok(OrchestratorAction::RequestCode {
            purpose: required("purpose")?,
        }),
        _ => {
            let hint = optional("summary_hint")?;
            let legacy = optional("purpose")?;
            if hint.is_some() && legacy.is_some() {
                return Err(ActionError::UnknownField {
                    action: action.to_string(),
                    field: "purpose".into(),
                });
            }
            Ok(OrchestratorAction::Finish {
                summary_hint: hint.or(legacy).filter(|s| !s.trim().is_empty()),
            })
        }
    }
}

/// Returns the first syntactically valid JSON object embedded in `text`,
/// whether bare, inside a code fence or surrounded by prose.
pub fn first_json_object(text: &str) -> Option<Value> {
    text.char_indices().filter(|&(_, c)| c == '{').find_map(|(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value @ Value::Object(_))) => Some(value),
            _ => None,
        }
    })
}

/// Tool definitions offered to the orchestrator in native tool-call mode:
/// one function per action.
pub fn action_tools() -> Value {
    json!([
        {
            "type": "function",
            "function": {
                "name": "request_text",
                "description": "Ask the text agent for the next Markdown cell.",
                "parameters": {
                    "type": "object",
                    "properties": {
                        "spec": {"type": "string", "description": "What the text should talk about: topic, focus or goal."}
                    },
                    "required": ["spec"],
                    "additionalProperties": false
                }
            }
        },
        {
            "type": "function",
            "function": {
                "name": "request_code",
                "description": "Ask the code agent for the next executable code cell.",
                "parameters": {
                    "type": "object",
                    "properties": {
                        "purpose": {"type": "string", "description": "What the code should achieve."}
                    },
                    "required": ["purpose"],
                    "additionalProperties": false
                }
            }
        },
        {
            "type": "function",
            "function": {
                "name": "finish",
                "description": "Declare the notebook complete.",
                "parameters": {
                    "type": "object",
                    "properties": {
                        "summary_hint": {"type": "string", "description": "Optional short note on results and next steps."}
                    },
                    "additionalProperties": false
                }
            }
        }
    ])
}

/// JSON Schema for the emulated (plain JSON) reply.
pub fn action_json_schema() -> Value {
    json!({
        "oneOf": [
            {
                "type": "object",
                "properties": {"action": {"const": "request_text"}, "spec": {"type": "string"}},
                "required": ["action", "spec"],
                "additionalProperties": false
            },
            {
                "type": "object",
                "properties": {"action": {"const": "request_code"}, "purpose": {"type": "string"}},
                "required": ["action", "purpose"],
                "additionalProperties": false
            },
            {
                "type": "object",
                "properties": {"action": {"const": "finish"}, "summary_hint": {"type": "string"}},
                "required": ["action"],
                "additionalProperties": false
            }
        ]
    })
}
