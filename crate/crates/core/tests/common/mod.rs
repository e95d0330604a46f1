#![allow(dead_code)]

pub mod actions;
pub mod notebook;
pub mod oracle;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;

use nbagent_core::domain::{
    AgentSettings, Cell, CellKind, ExecutionResult, ExecutionStatus, Instruction, OrchestratorAction, ProjectSpec,
    RunConfig, Session, SessionStatus, StepClock, ToolMode, TraceRecord,
};
use nbagent_core::gateway::{AgentRole, Gateway, ScriptedResponse};
use nbagent_core::sandbox::{RuntimeSpec, Sandbox, SandboxOptions};
use nbagent_core::Engine;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const SESSION_ID: &str = "fixture-session";

pub fn local_runtime() -> RuntimeSpec {
    RuntimeSpec::Local {
        python: "python3".into(),
    }
}

pub fn clock() -> Arc<StepClock> {
    Arc::new(StepClock::new(1_700_000_000_000, 1))
}

pub fn open_local_sandbox(assets: &Path, data: &str) -> Sandbox {
    Sandbox::open(
        SESSION_ID,
        data,
        SandboxOptions {
            runtime: local_runtime(),
            network_enabled: false,
            assets_dir: assets.to_path_buf(),
        },
        clock(),
    )
    .expect("local sandbox opens")
}

pub fn fixture_spec() -> ProjectSpec {
    ProjectSpec {
        general_instructions: vec![
            Instruction {
                key: "Estimated steps".into(),
                value: "3".into(),
            },
            Instruction {
                key: "Plan verbosity".into(),
                value: "brief".into(),
            },
        ],
        task_description: "Say hello from the sandbox.".into(),
        data_description: "No data.".into(),
        metrics: "None.".into(),
        ..Default::default()
    }
}

pub fn text_call(spec: &str) -> ScriptedResponse {
    ScriptedResponse::tool_call("request_text", json!({ "spec": spec }))
}

pub fn code_call(purpose: &str) -> ScriptedResponse {
    ScriptedResponse::tool_call("request_code", json!({ "purpose": purpose }))
}

pub fn finish_call(hint: &str) -> ScriptedResponse {
    ScriptedResponse::tool_call("finish", json!({ "summary_hint": hint }))
}

/// Routes each role to its own scripted backend. Empty scripts leave the
/// role unrouted.
pub fn scripted_gateway(
    orchestrator: Vec<ScriptedResponse>,
    text: Vec<ScriptedResponse>,
    code: Vec<ScriptedResponse>,
) -> Arc<Gateway> {
    let gateway = Gateway::new();
    for (role, script) in [
        (AgentRole::Orchestrator, orchestrator),
        (AgentRole::TextAgent, text),
        (AgentRole::CodeAgent, code),
    ] {
        if !script.is_empty() {
            let id = gateway.script_backend(script).unwrap();
            gateway.route(role, id);
        }
    }
    Arc::new(gateway)
}

/// The three-action fixture: text, `print('hello')`, finish.
pub fn three_action_gateway() -> Arc<Gateway> {
    scripted_gateway(
        vec![
            text_call("Outline the plan."),
            code_call("Print a greeting."),
            finish_call("Greeting printed."),
        ],
        vec![ScriptedResponse::text("1. Print a greeting.\n2. Finish.")],
        vec![ScriptedResponse::text("print('hello')")],
    )
}

pub fn fixture_session(config: RunConfig) -> Session {
    Session::with_id(SESSION_ID, fixture_spec(), config).unwrap()
}

/// Runs the three-action fixture end to end against a local sandbox.
pub fn run_three_action_fixture(assets: &Path) -> Session {
    let sandbox = open_local_sandbox(assets, "");
    let mut engine = Engine::new(three_action_gateway(), Box::new(sandbox), clock());
    let mut session = fixture_session(RunConfig::default());
    engine.autorun(&mut session, &|| false).expect("autorun succeeds");
    session
}

/// Minimal HTTP/1.1 server answering every request with `handler`.
pub struct StubServer {
    pub base_url: String,
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&StubRequest) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handler = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let mut parts = line.split_whitespace();
                    let method = parts.next().unwrap_or_default().to_string();
                    let path = parts.next().unwrap_or_default().to_string();
                    let mut length = 0usize;
                    let mut authorization = None;
                    loop {
                        let mut header = String::new();
                        reader.read_line(&mut header).unwrap();
                        let header = header.trim_end();
                        if header.is_empty() {
                            break;
                        }
                        if let Some((name, value)) = header.split_once(':') {
                            match name.to_ascii_lowercase().as_str() {
                                "content-length" => length = value.trim().parse().unwrap(),
                                "authorization" => authorization = Some(value.trim().to_string()),
                                _ => {}
                            }
                        }
                    }
                    let mut body = vec![0u8; length];
                    reader.read_exact(&mut body).unwrap();
                    let request = StubRequest {
                        method,
                        path,
                        authorization,
                        body: String::from_utf8_lossy(&body).into_owned(),
                    };
                    let (status, body) = handler(&request);
                    let response = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(response.as_bytes());
                });
            }
        });
        Self {
            base_url: format!("http://{addr}/v1"),
        }
    }
}

/// An address nothing listens on.
pub fn dead_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/v1")
}

// ---------------------------------------------------------------------------
// Random sessions

const WORDS: &[&str] = &[
    "load",
    "train",
    "évaluer",
    "数据",
    "model",
    "loss",
    "0.72",
    "🚀",
    "df.head()",
    "`x`",
    "```",
    "NaN",
    "\t",
    "  ",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(if rng.gen_bool(0.15) { '\n' } else { ' ' });
        }
        out.push_str(WORDS.choose(rng).unwrap());
    }
    out
}

fn random_output(rng: &mut ChaCha8Rng, max_lines: usize) -> String {
    let n = rng.gen_range(0..=max_lines);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("line {i}: {}", random_text(rng, 4)));
        out.push('\n');
    }
    if n > 0 && rng.gen_bool(0.2) {
        out.pop();
    }
    out
}

fn random_result(rng: &mut ChaCha8Rng, attempt: u32, max_lines: usize) -> ExecutionResult {
    let status = *[
        ExecutionStatus::Success,
        ExecutionStatus::Error,
        ExecutionStatus::Timeout,
    ]
    .choose(rng)
    .unwrap();
    let mut stderr = random_output(rng, max_lines);
    if status == ExecutionStatus::Error && stderr.is_empty() {
        stderr = "Traceback (most recent call last):\nValueError\n".into();
    }
    let artifacts = if rng.gen_bool(0.2) {
        vec![format!("plots/fig{}.png", rng.gen_range(0..9))]
    } else {
        vec![]
    };
    ExecutionResult {
        attempt,
        status,
        stdout: random_output(rng, max_lines),
        stderr,
        duration_ms: rng.gen_range(0..5_000),
        artifacts_written: artifacts,
    }
}

pub fn random_config(rng: &mut ChaCha8Rng) -> RunConfig {
    let agent = |rng: &mut ChaCha8Rng| AgentSettings {
        model_id: if rng.gen_bool(0.5) {
            String::new()
        } else {
            "model-x".into()
        },
        temperature: rng.gen_range(0.0..=2.0),
    };
    let mut config = RunConfig {
        max_steps: rng.gen_range(20..=60),
        max_code_retries: rng.gen_range(0..=5),
        history_char_limit: *[200usize, 1_000, 5_000, 10_000].choose(rng).unwrap(),
        head_tail_lines: rng.gen_range(1..=25),
        tool_mode: if rng.gen_bool(0.5) {
            ToolMode::NativeToolCalls
        } else {
            ToolMode::EmulatedJson
        },
        cell_timeout_ms: rng.gen_range(1..=300_000),
        network_enabled: rng.gen_bool(0.1),
        ..RunConfig::default()
    };
    config.agents.orchestrator = agent(rng);
    config.agents.text = agent(rng);
    config.agents.code = agent(rng);
    config
}

/// A valid random session: cells ≤ `max_cells`, outputs ≤ `max_lines` lines.
pub fn random_session(rng: &mut ChaCha8Rng, max_cells: usize, max_lines: usize) -> Session {
    let mut spec = ProjectSpec::new(format!("task {}", random_text(rng, 6)));
    for field in [
        &mut spec.data_description,
        &mut spec.metrics,
        &mut spec.inputs,
        &mut spec.outputs,
        &mut spec.special_instructions,
    ] {
        if rng.gen_bool(0.5) {
            *field = random_text(rng, 10);
        }
    }
    if rng.gen_bool(0.5) {
        spec.data_location = "/data/train.csv".into();
    }
    for i in 0..rng.gen_range(0..4) {
        spec.general_instructions.push(Instruction {
            key: format!("k{i}"),
            value: random_text(rng, 3),
        });
    }
    let config = random_config(rng);
    let mut session = Session::with_id(format!("sess-{}", rng.gen::<u32>()), spec, config).unwrap();
    let n_cells = rng.gen_range(0..=max_cells);
    let mut at = 1_700_000_000_000u64;
    for i in 0..n_cells {
        at += rng.gen_range(0..1000);
        let finish_here = i + 1 == n_cells && rng.gen_bool(0.3);
        let kind = if finish_here {
            CellKind::Finish
        } else if rng.gen_bool(0.5) {
            CellKind::Text
        } else {
            CellKind::Code
        };
        let source = random_text(rng, 30);
        let purpose = random_text(rng, 5);
        let cell = session.append_cell(kind, source, purpose, at).unwrap();
        if kind == CellKind::Code && rng.gen_bool(0.9) {
            let attempts = rng.gen_range(1..=3);
            for attempt in 1..=attempts {
                cell.results.push(random_result(rng, attempt, max_lines));
            }
        }
    }
    session.step_count = (session.cells.len() as u32).min(session.config.max_steps);
    if session.status != SessionStatus::Finished {
        session.status = *[
            SessionStatus::Idle,
            SessionStatus::Running,
            SessionStatus::AwaitingNextStep,
            SessionStatus::StoppedMaxSteps,
            SessionStatus::Failed,
        ]
        .choose(rng)
        .unwrap();
    }
    for _ in 0..rng.gen_range(0..4) {
        let record = match rng.gen_range(0..4) {
            0 => TraceRecord::Action {
                at,
                step: 1,
                action: OrchestratorAction::Finish {
                    summary_hint: rng.gen_bool(0.5).then(|| random_text(rng, 3)),
                },
            },
            1 => TraceRecord::RenderSize {
                at,
                step: 2,
                role: AgentRole::CodeAgent,
                untruncated_chars: 12_000,
                emitted_chars: 10_000,
                truncated: true,
            },
            2 => TraceRecord::Retry {
                at,
                cell_id: 1,
                attempt: 2,
                previous_source: random_text(rng, 4),
            },
            _ => TraceRecord::Note {
                at,
                message: random_text(rng, 4),
            },
        };
        session.trace.push(record);
    }
    session
}

pub fn failed_code_cell(cell: &Cell) -> bool {
    cell.kind == CellKind::Code && cell.failed()
}

pub fn text_reply(text: &str) -> nbagent_core::gateway::ChatResponse {
    nbagent_core::gateway::ChatResponse {
        raw_text: text.into(),
        native_tool_call: None,
        model_id: "m".into(),
        latency_ms: 0,
    }
}

pub fn tool_reply(name: &str, arguments_json: &str) -> nbagent_core::gateway::ChatResponse {
    nbagent_core::gateway::ChatResponse {
        raw_text: String::new(),
        native_tool_call: Some(nbagent_core::gateway::ToolCall {
            name: name.into(),
            arguments_json: arguments_json.into(),
        }),
        model_id: "m".into(),
        latency_ms: 0,
    }
}
