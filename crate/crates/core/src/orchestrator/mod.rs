//! The routing loop. Each step renders the session history, asks the
//! orchestrator model for one action, and dispatches it: text and code
//! requests go to the matching sub-agent, `finish` closes the notebook.
//! Failed code cells are rewritten and re-run up to `max_code_retries` times.

pub mod action;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentRole, Cell, CellKind, ExecutionResult, OrchestratorAction, RunConfig, Session, SessionStatus, SharedClock,
    ToolMode, TraceRecord,
};
use crate::gateway::{ChatRequest, ChatResponse, Gateway, GatewayError};
use crate::prompts::Prompts;
use crate::render::{render_history, render_size_report, RenderOptions};
use crate::sandbox::{CellExecutor, SandboxError};
pub use action::{parse_action, ActionError};

pub const DEFAULT_FINISH_SUMMARY: &str = "the notebook is complete.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StepError {
    #[error("step limit of {0} reached")]
    LimitReached(u32),
    #[error("session cannot step while {0:?}")]
    NotRunnable(SessionStatus),
    #[error("orchestrator reply rejected twice: {0}")]
    ActionParseFailure(ActionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub action_taken: OrchestratorAction,
    /// Id of the cell this step appended, if any.
    pub cell_produced: Option<u64>,
    pub execution: Option<ExecutionResult>,
    pub halted: bool,
}

/// Notifications emitted while a session advances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EngineEvent {
    CellAdded { cell: Cell },
    CellUpdated { cell: Cell },
    Trace { record: TraceRecord },
    Status { status: SessionStatus, step_count: u32 },
    Reset,
}

pub type Observer = Box<dyn FnMut(&EngineEvent) + Send>;

/// Drives one session. Owns the session's executor; the gateway is shared.
pub struct Engine {
    gateway: Arc<Gateway>,
    executor: Box<dyn CellExecutor>,
    clock: SharedClock,
    prompts: Prompts,
    observer: Option<Observer>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(gateway: Arc<Gateway>, executor: Box<dyn CellExecutor>, clock: SharedClock) -> Self {
        Self {
            gateway,
            executor,
            clock,
            prompts: Prompts::default(),
            observer: None,
        }
    }

    pub fn with_prompts(mut self, prompts: Prompts) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_observer(mut self, observer: Observer) -> Self {
        self.observer = Some(observer);
        self
    }

    fn emit(&mut self, event: EngineEvent) {
        if let Some(observer) = self.observer.as_mut() {
            observer(&event);
        }
    }

    fn trace(&mut self, session: &mut Session, record: TraceRecord) {
        session.trace.push(record.clone());
        self.emit(EngineEvent::Trace { record });
    }

    fn set_status(&mut self, session: &mut Session, status: SessionStatus) {
        session.status = status;
        self.emit(EngineEvent::Status {
            status,
            step_count: session.step_count,
        });
    }

    /// Renders the shared context and records its size.
    fn context_for(&mut self, session: &mut Session, role: AgentRole) -> String {
        let opts = RenderOptions::from(&session.config);
        let report = render_size_report(session, opts);
        let rendered = render_history(session, opts);
        let record = TraceRecord::RenderSize {
            at: self.clock.now_ms(),
            step: session.step_count,
            role,
            untruncated_chars: report.untruncated_chars,
            emitted_chars: report.emitted_chars,
            truncated: report.truncated,
        };
        self.trace(session, record);
        rendered
    }

    fn request(&self, config: &RunConfig, role: AgentRole, context: String, instruction: String) -> ChatRequest {
        let settings = match role {
            AgentRole::Orchestrator => &config.agents.orchestrator,
            AgentRole::TextAgent => &config.agents.text,
            AgentRole::CodeAgent => &config.agents.code,
        };
        let paths = self.executor.code_paths();
        let structured_schema = (role == AgentRole::Orchestrator && config.tool_mode == ToolMode::NativeToolCalls)
            .then(action::action_tools);
        ChatRequest {
            role,
            model_id: settings.model_id.clone(),
            system_prompt: self.prompts.system_prompt(role, &paths.assets_dir, &paths.data_dir),
            rendered_context: context,
            instruction,
            structured_schema,
            temperature: settings.temperature,
        }
    }

    /// Consumes exactly one orchestrator decision.
    pub fn step(&mut self, session: &mut Session) -> Result<StepOutcome, StepError> {
        if session.step_count >= session.config.max_steps
            && matches!(session.status, SessionStatus::Idle | SessionStatus::AwaitingNextStep)
        {
            self.set_status(session, SessionStatus::StoppedMaxSteps);
            return Err(StepError::LimitReached(session.config.max_steps));
        }
        if !matches!(session.status, SessionStatus::Idle | SessionStatus::AwaitingNextStep) {
            return Err(StepError::NotRunnable(session.status));
        }
        let resume_status = session.status;
        self.set_status(session, SessionStatus::Running);

        let action = match self.decide(session) {
            Ok(action) => action,
            Err(StepError::ActionParseFailure(e)) => {
                self.set_status(session, SessionStatus::Failed);
                return Err(StepError::ActionParseFailure(e));
            }
            Err(e) => {
                self.set_status(session, resume_status);
                return Err(e);
            }
        };
        session.step_count += 1;
        let record = TraceRecord::Action {
            at: self.clock.now_ms(),
            step: session.step_count,
            action: action.clone(),
        };
        self.trace(session, record);

        let dispatched = self.dispatch(session, &action);
        let halted = match session.status {
            SessionStatus::Finished => true,
            _ if session.step_count >= session.config.max_steps => {
                self.set_status(session, SessionStatus::StoppedMaxSteps);
                true
            }
            _ => {
                self.set_status(session, SessionStatus::AwaitingNextStep);
                false
            }
        };
        let (cell_produced, execution) = dispatched?;
        Ok(StepOutcome {
            action_taken: action,
            cell_produced,
            execution,
            halted,
        })
    }

    fn decide(&mut self, session: &mut Session) -> Result<OrchestratorAction, StepError> {
        let mode = session.config.tool_mode;
        let base_instruction = match mode {
            ToolMode::NativeToolCalls => "Choose the next action by calling exactly one of the tools.".to_string(),
            ToolMode::EmulatedJson => format!(
                "Choose the next action. Reply with a single JSON object and nothing else, \
                 matching this schema:\n{}",
                action::action_json_schema()
            ),
        };
        let context = self.context_for(session, AgentRole::Orchestrator);
        let mut instruction = base_instruction.clone();
        for attempt in 0..2 {
            let request = self.request(&session.config, AgentRole::Orchestrator, context.clone(), instruction);
            let response = self.gateway.complete(&request)?;
            match parse_action(&response, mode) {
                Ok(action) => return Ok(action),
                Err(err) => {
                    let record = TraceRecord::ParseFailure {
                        at: self.clock.now_ms(),
                        step: session.step_count + 1,
                        error: err.to_string(),
                        raw: describe_response(&response),
                    };
                    self.trace(session, record);
                    if attempt == 1 {
                        return Err(StepError::ActionParseFailure(err));
                    }
                    instruction = format!(
                        "{base_instruction}\n\nYour previous reply was rejected ({err}). The only valid \
                         actions are request_text (with spec), request_code (with purpose) and finish \
                         (with optional summary_hint). Reply with exactly one valid action."
                    );
                }
            }
        }
        unreachable!("loop returns on the second attempt")
    }

    fn dispatch(
        &mut self,
        session: &mut Session,
        action: &OrchestratorAction,
    ) -> Result<(Option<u64>, Option<ExecutionResult>), StepError> {
        match action {
            OrchestratorAction::RequestText { spec } => {
                let context = self.context_for(session, AgentRole::TextAgent);
                let request = self.request(
                    &session.config,
                    AgentRole::TextAgent,
                    context,
                    format!("Write the next Markdown text cell. Topic: {spec}"),
                );
                let response = self.gateway.complete(&request)?;
                let cell = self.append(session, CellKind::Text, response.raw_text.trim().to_string(), spec)?;
                Ok((Some(cell), None))
            }
            OrchestratorAction::RequestCode { purpose } => {
                let context = self.context_for(session, AgentRole::CodeAgent);
                let request = self.request(
                    &session.config,
                    AgentRole::CodeAgent,
                    context,
                    format!("Write the next code cell. Purpose: {purpose}"),
                );
                let response = self.gateway.complete(&request)?;
                let cell = self.append(session, CellKind::Code, extract_code(&response.raw_text), purpose)?;
                let result = self.retry_code_loop(session, cell)?;
                Ok((Some(cell), Some(result)))
            }
            OrchestratorAction::Finish { summary_hint } => {
                let source = format!(
                    "Finished: {}",
                    summary_hint.as_deref().unwrap_or(DEFAULT_FINISH_SUMMARY)
                );
                let hint = summary_hint.clone().unwrap_or_default();
                let cell = self.append(session, CellKind::Finish, source, &hint)?;
                self.emit(EngineEvent::Status {
                    status: session.status,
                    step_count: session.step_count,
                });
                Ok((Some(cell), None))
            }
        }
    }

    fn append(
        &mut self,
        session: &mut Session,
        kind: CellKind,
        source: String,
        purpose: &str,
    ) -> Result<u64, StepError> {
        let now = self.clock.now_ms();
        let status = session.status;
        let cell = session
            .append_cell(kind, source, purpose, now)
            .map_err(|_| StepError::NotRunnable(status))?
            .clone();
        let id = cell.id;
        self.emit(EngineEvent::CellAdded { cell });
        Ok(id)
    }

    /// Runs a code cell, asking the code agent for rewrites while it fails,
    /// up to `max_code_retries` rewrites. Every attempt's result is kept on
    /// the cell; the last one is returned.
    pub fn retry_code_loop(&mut self, session: &mut Session, cell_id: u64) -> Result<ExecutionResult, StepError> {
        let max_retries = session.config.max_code_retries;
        let timeout_ms = session.config.cell_timeout_ms;
        let mut attempt = 1u32;
        loop {
            let source = session.cell_mut(cell_id).expect("cell exists").source.clone();
            let mut result = self.executor.execute(&source, timeout_ms)?;
            result.attempt = attempt;
            let record = TraceRecord::Execution {
                at: self.clock.now_ms(),
                cell_id,
                attempt,
                status: result.status,
                duration_ms: result.duration_ms,
            };
            let cell = session.cell_mut(cell_id).expect("cell exists");
            cell.results.push(result.clone());
            let snapshot = cell.clone();
            self.emit(EngineEvent::CellUpdated { cell: snapshot });
            self.trace(session, record);

            if result.is_success() || attempt > max_retries {
                return Ok(result);
            }

            let (label, purpose) = {
                let cell = session.cell_mut(cell_id).expect("cell exists");
                (cell.label(), cell.purpose_or_spec.clone())
            };
            let context = self.context_for(session, AgentRole::CodeAgent);
            let request = self.request(
                &session.config,
                AgentRole::CodeAgent,
                context,
                format!(
                    "{label} failed with the error shown above. Rewrite the whole cell so that it runs \
                     and achieves its purpose: {purpose}"
                ),
            );
            let response = self.gateway.complete(&request)?;
            let rewritten = extract_code(&response.raw_text);
            let cell = session.cell_mut(cell_id).expect("cell exists");
            let previous_source = std::mem::replace(&mut cell.source, rewritten);
            let snapshot = cell.clone();
            let record = TraceRecord::Retry {
                at: self.clock.now_ms(),
                cell_id,
                attempt: attempt + 1,
                previous_source,
            };
            self.trace(session, record);
            self.emit(EngineEvent::CellUpdated { cell: snapshot });
            attempt += 1;
        }
    }

    /// Steps until the session halts, a step fails, or `cancelled` reports
    /// true at a step boundary.
    pub fn autorun(&mut self, session: &mut Session, cancelled: &dyn Fn() -> bool) -> Result<(), StepError> {
        if session.status.is_terminal() {
            return Ok(());
        }
        loop {
            if cancelled() {
                return Ok(());
            }
            match self.step(session) {
                Ok(outcome) if outcome.halted => return Ok(()),
                Ok(_) => {}
                Err(StepError::LimitReached(_)) => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    /// Clears the transcript and discards interpreter state.
    pub fn reset(&mut self, session: &mut Session) -> Result<(), StepError> {
        session.reset();
        self.emit(EngineEvent::Reset);
        self.executor.reset()?;
        Ok(())
    }

    /// Prepares a session loaded from a run file. The interpreter starts
    /// empty; with `replay`, the final source of every successful code cell
    /// is re-executed in order to rebuild its state.
    pub fn resume(&mut self, session: &mut Session, replay: bool) -> Result<(), StepError> {
        let message = if replay {
            "Resumed from a saved run; replaying successful code cells to rebuild interpreter state."
        } else {
            "Resumed from a saved run; interpreter state was not restored, so variables defined by \
             earlier cells are undefined. Cell sources and outputs are intact."
        };
        let record = TraceRecord::Note {
            at: self.clock.now_ms(),
            message: message.to_string(),
        };
        self.trace(session, record);
        if replay {
            let sources: Vec<(String, String)> = session
                .cells
                .iter()
                .filter(|c| c.kind == CellKind::Code && c.succeeded())
                .map(|c| (c.label(), c.source.clone()))
                .collect();
            for (label, source) in sources {
                let result = self.executor.execute(&source, session.config.cell_timeout_ms)?;
                if !result.is_success() {
                    let record = TraceRecord::Note {
                        at: self.clock.now_ms(),
                        message: format!("Replay of {label} failed: {}", result.stderr.trim_end()),
                    };
                    self.trace(session, record);
                }
            }
        }
        Ok(())
    }
}

fn describe_response(response: &ChatResponse) -> String {
    match &response.native_tool_call {
        Some(call) => format!("tool_call {}({})", call.name, call.arguments_json),
        None => response.raw_text.clone(),
    }
}

/// The body of the first fenced block, or the whole reply when unfenced.
pub fn extract_code(reply: &str) -> String {
    let mut lines = reply.lines();
    while let Some(line) = lines.next() {
        let trimmed = line.trim_start();
        let ticks = trimmed.chars().take_while(|&c| c == '`').count();
        if ticks >= 3 {
            let fence = &trimmed[..ticks];
            let body: Vec<&str> = lines
                .by_ref()
                .take_while(|l| !(l.trim_start().starts_with(fence) && l.trim().chars().all(|c| c == '`')))
                .collect();
            return body.join("\n");
        }
    }
    reply.trim().to_string()
}
