//! Wiring shared by the CLI and the service: one assets directory, one
//! sandbox and one engine per session.

use std::sync::Arc;

use anyhow::Context;
use nbagent_core::assets::{export_markdown, export_notebook, save_run, AssetKind, AssetsDir};
use nbagent_core::domain::{OrchestratorAction, Session, SharedClock, TraceRecord};
use nbagent_core::orchestrator::Observer;
use nbagent_core::prompts::Prompts;
use nbagent_core::sandbox::{Sandbox, SandboxOptions};
use nbagent_core::{Engine, EngineEvent};

use crate::config::ServiceConfig;

pub const RUN_JSON: &str = "run.json";
pub const RUN_MARKDOWN: &str = "run.md";
pub const RUN_NOTEBOOK: &str = "run.ipynb";

/// A session's engine and the assets directory its sandbox writes into.
pub struct Prepared {
    pub engine: Engine,
    pub assets: Arc<AssetsDir>,
}

/// Creates the assets directory, records the spec, opens the sandbox and
/// builds the engine. Every engine event is appended to the debug log
/// before being passed on to `forward`.
pub fn prepare(
    config: &ServiceConfig,
    session: &Session,
    clock: SharedClock,
    mut forward: Option<Observer>,
) -> anyhow::Result<Prepared> {
    let assets =
        Arc::new(AssetsDir::create(&config.assets_root, &session.session_id).context("creating the assets directory")?);
    let spec_json = serde_json::to_string_pretty(&session.spec).expect("spec serializes");
    assets.write_asset(AssetKind::Spec, &spec_json)?;

    let gateway = config.build_gateway()?;
    let sandbox = Sandbox::open(
        &session.session_id,
        &session.spec.data_location,
        SandboxOptions {
            runtime: config.sandbox.clone(),
            network_enabled: session.config.network_enabled,
            assets_dir: assets.root().to_path_buf(),
        },
        Arc::clone(&clock),
    )
    .context("opening the sandbox")?;
    let prompts = match &config.prompts_dir {
        Some(dir) => Prompts::from_dir(dir).with_context(|| format!("reading prompts from {}", dir.display()))?,
        None => Prompts::default(),
    };

    let log = Arc::clone(&assets);
    let observer = move |event: &EngineEvent| {
        if let Some(line) = describe_event(event) {
            if let Err(e) = log.write_asset(AssetKind::DebugLog, &line) {
                log::warn!("debug log write failed: {e}");
            }
        }
        if let Some(forward) = forward.as_mut() {
            forward(event);
        }
    };
    let engine = Engine::new(gateway, Box::new(sandbox), clock)
        .with_prompts(prompts)
        .with_observer(Box::new(observer));
    Ok(Prepared { engine, assets })
}

fn clip(text: &str, max: usize) -> String {
    let line = text.lines().next().unwrap_or_default();
    if line.chars().count() > max || text.contains('\n') {
        let head: String = line.chars().take(max).collect();
        format!("{head}...")
    } else {
        line.to_string()
    }
}

/// One log line per event worth reporting.
pub fn describe_event(event: &EngineEvent) -> Option<String> {
    match event {
        EngineEvent::Trace { record } => Some(match record {
            TraceRecord::Action { step, action, .. } => {
                let detail = match action {
                    OrchestratorAction::RequestText { spec } => format!("request_text: {}", clip(spec, 80)),
                    OrchestratorAction::RequestCode { purpose } => format!("request_code: {}", clip(purpose, 80)),
                    OrchestratorAction::Finish { summary_hint } => match summary_hint {
                        Some(hint) => format!("finish: {}", clip(hint, 80)),
                        None => "finish".into(),
                    },
                };
                format!("step {step}: {detail}")
            }
            TraceRecord::RenderSize {
                step,
                role,
                untruncated_chars,
                emitted_chars,
                truncated,
                ..
            } => {
                let mut line = format!("step {step}: {} context {emitted_chars} chars", role.as_str());
                if *truncated {
                    line.push_str(&format!(" (truncated from {untruncated_chars})"));
                }
                line
            }
            TraceRecord::Execution {
                cell_id,
                attempt,
                status,
                duration_ms,
                ..
            } => format!("cell {cell_id} attempt {attempt}: {status:?} in {duration_ms} ms").to_lowercase(),
            TraceRecord::Retry { cell_id, attempt, .. } => {
                format!("cell {cell_id}: rewriting after failure (attempt {attempt})")
            }
            TraceRecord::ParseFailure { step, error, .. } => format!("step {step}: rejected reply: {error}"),
            TraceRecord::Note { message, .. } => message.clone(),
        }),
        EngineEvent::CellAdded { cell } => Some(format!("added {}", cell.label())),
        EngineEvent::Status { status, step_count } => {
            let status = serde_json::to_value(status).expect("status serializes");
            Some(format!(
                "status {} after {step_count} steps",
                status.as_str().unwrap_or_default()
            ))
        }
        EngineEvent::Reset => Some("session reset".into()),
        EngineEvent::CellUpdated { .. } => None,
    }
}

/// Writes the run file, Markdown and notebook exports under `runs/`.
pub fn write_exports(assets: &AssetsDir, session: &Session) -> anyhow::Result<Vec<String>> {
    Ok(vec![
        assets.write_export(RUN_JSON, &save_run(session))?,
        assets.write_export(RUN_MARKDOWN, export_markdown(session).as_bytes())?,
        assets.write_export(RUN_NOTEBOOK, &export_notebook(session))?,
    ])
}
