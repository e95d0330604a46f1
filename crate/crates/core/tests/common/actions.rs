//! Orchestrator reply fixtures shared by the parser tests and the
//! acceptance suite.

use nbagent_core::domain::OrchestratorAction;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

/// The three published decision examples with the actions they denote.
pub fn listings() -> Vec<(&'static str, OrchestratorAction)> {
    vec![
        (
            r#"{"action":"request_text","spec":"Explain how the model will be evaluated and metrics that have to be computed."}"#,
            OrchestratorAction::RequestText {
                spec: "Explain how the model will be evaluated and metrics that have to be computed.".into(),
            },
        ),
        (
            r#"{"action":"request_code","purpose":"Load the training and test datasets into pandas DataFrames."}"#,
            OrchestratorAction::RequestCode {
                purpose: "Load the training and test datasets into pandas DataFrames.".into(),
            },
        ),
        (
            r#"{"action":"finish","purpose":"Baseline logistic regression trained and evaluated. Accuracy is about 0.72. No further steps required."}"#,
            OrchestratorAction::Finish {
                summary_hint: Some(
                    "Baseline logistic regression trained and evaluated. Accuracy is about 0.72. No further steps required."
                        .into(),
                ),
            },
        ),
    ]
}

/// Free-form replies a model might give without native tool calls, paired
/// with the action a careful reader extracts by hand.
pub fn emulation_fixtures() -> Vec<(&'static str, OrchestratorAction)> {
    vec![
        (
            "Sure, here is my decision:\n```json\n{\"action\":\"request_code\",\"purpose\":\"x\"}\n```\nLet me know.",
            OrchestratorAction::RequestCode { purpose: "x".into() },
        ),
        (
            "The data is loaded {see above}. Next: {\"action\": \"request_text\", \"spec\": \"Describe the columns {a, b}.\"} and then we continue.",
            OrchestratorAction::RequestText {
                spec: "Describe the columns {a, b}.".into(),
            },
        ),
        (
            "```\n{\n  \"action\": \"finish\",\n  \"summary_hint\": \"Model saved.\"\n}\n```",
            OrchestratorAction::Finish {
                summary_hint: Some("Model saved.".into()),
            },
        ),
        (
            "I considered {\"action\": \"request_code\", \"purpose\": \"fit\"} first, but\n{\"action\":\"finish\"}",
            OrchestratorAction::RequestCode { purpose: "fit".into() },
        ),
        (
            "{\"action\":\"finish\"}",
            OrchestratorAction::Finish { summary_hint: None },
        ),
    ]
}

const BAD_NAMES: &[&str] = &[
    "write_code",
    "write_text",
    "request_plot",
    "Request_Text",
    "FINISH",
    "finish ",
    " request_code",
    "request-code",
    "requesttext",
    "run_code",
    "stop",
    "",
];

fn junk_value(rng: &mut ChaCha8Rng) -> Value {
    match rng.gen_range(0..5) {
        0 => json!(rng.gen_range(-5..500)),
        1 => json!(rng.gen_bool(0.5)),
        2 => json!(["a", 1]),
        3 => json!({"nested": "x"}),
        _ => json!(rng.gen::<f64>()),
    }
}

fn valid_base(rng: &mut ChaCha8Rng) -> (&'static str, Map<String, Value>) {
    let mut object = Map::new();
    let name = *["request_text", "request_code", "finish"].choose(rng).unwrap();
    object.insert("action".into(), json!(name));
    match name {
        "request_text" => object.insert("spec".into(), json!("topic")),
        "request_code" => object.insert("purpose".into(), json!("goal")),
        _ => object.insert("summary_hint".into(), json!("done")),
    };
    (name, object)
}

/// One payload that violates the action schema, as (tool name, arguments)
/// for the native path and as plain text for the emulated path. Every
/// generated payload is invalid by construction.
pub fn invalid_payload(rng: &mut ChaCha8Rng) -> (String, String, String) {
    let (name, mut object) = valid_base(rng);
    let mut tool_name = name.to_string();
    match rng.gen_range(0..7) {
        // Unknown action name.
        0 => {
            let bad = *BAD_NAMES.choose(rng).unwrap();
            object.insert("action".into(), json!(bad));
            tool_name = bad.to_string();
        }
        // Required field missing or blank.
        1 => {
            let field = match name {
                "request_text" => "spec",
                "request_code" => "purpose",
                _ => return invalid_payload(rng),
            };
            if rng.gen_bool(0.5) {
                object.remove(field);
            } else {
                object.insert(field.into(), json!(["", "  ", "\n"].choose(rng).unwrap()));
            }
        }
        // Field of the wrong type.
        2 => {
            let field = match name {
                "request_text" => "spec",
                "request_code" => "purpose",
                _ => "summary_hint",
            };
            object.insert(field.into(), junk_value(rng));
        }
        // Field that belongs to no action, or to a different one.
        3 => {
            let extra = *["spec", "purpose", "code", "text", "reason", "summary"]
                .choose(rng)
                .unwrap();
            let clash = match name {
                "request_text" => extra == "spec",
                "request_code" => extra == "purpose",
                _ => extra == "purpose",
            };
            if clash {
                object.insert("confidence".into(), json!(0.9));
            } else {
                object.insert(extra.into(), json!("x"));
            }
        }
        // Action tag of the wrong type.
        4 => {
            object.insert("action".into(), junk_value(rng));
        }
        // finish carrying both spellings of the hint.
        5 => {
            object = Map::new();
            object.insert("action".into(), json!("finish"));
            object.insert("summary_hint".into(), json!("a"));
            object.insert("purpose".into(), json!("b"));
            tool_name = "finish".into();
        }
        // No action tag at all.
        _ => {
            object.remove("action");
            tool_name = String::new();
        }
    }
    let arguments = Value::Object(object);
    let text = match rng.gen_range(0..3) {
        0 => arguments.to_string(),
        1 => format!("Decision follows.\n```json\n{arguments}\n```"),
        _ => format!("I pick {arguments} now."),
    };
    let mut args_for_tool = arguments.clone();
    // Native calls carry the name separately; keep an inline tag only when
    // it is itself the defect.
    if args_for_tool.get("action") == Some(&json!(tool_name)) {
        args_for_tool.as_object_mut().unwrap().remove("action");
    }
    (tool_name, args_for_tool.to_string(), text)
}

/// Replies that contain no JSON object at all.
pub fn jsonless_replies() -> Vec<&'static str> {
    vec![
        "I think we should request code next.",
        "request_code: load the data",
        "[\"request_text\", \"spec\"]",
        "\"finish\"",
        "{ not json }",
        "   ",
    ]
}
