//! Session data model: project spec, cells, execution results and the
//! session state machine shared by every other module.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by session-level operations.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("invalid spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("session is closed (status {0:?})")]
    SessionClosed(SessionStatus),
}

/// One `key: value` line of the general instructions section.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub key: String,
    pub value: String,
}

/// The structured project prompt: general instructions plus the
/// task-specific fields.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectSpec {
    #[serde(default)]
    pub general_instructions: Vec<Instruction>,
    pub task_description: String,
    #[serde(default)]
    pub data_description: String,
    #[serde(default)]
    pub data_location: String,
    #[serde(default)]
    pub metrics: String,
    #[serde(default)]
    pub inputs: String,
    #[serde(default)]
    pub outputs: String,
    #[serde(default)]
    pub special_instructions: String,
}

impl ProjectSpec {
    pub fn new(task_description: impl Into<String>) -> Self {
        Self {
            task_description: task_description.into(),
            ..Default::default()
        }
    }

    /// Labeled task-specific fields in display order.
    pub fn task_fields(&self) -> [(&'static str, &str); 7] {
        [
            ("Task description", &self.task_description),
            ("Data description", &self.data_description),
            ("Data location", &self.data_location),
            ("Metrics", &self.metrics),
            ("Inputs", &self.inputs),
            ("Outputs", &self.outputs),
            ("Special instructions", &self.special_instructions),
        ]
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.task_description.trim().is_empty() {
            return Err(DomainError::InvalidSpec {
                field: "task_description",
                reason: "must not be empty".into(),
            });
        }
        if !self.data_location.is_empty() {
            DataLocation::parse(&self.data_location).map_err(|reason| DomainError::InvalidSpec {
                field: "data_location",
                reason,
            })?;
        }
        for item in &self.general_instructions {
            if item.key.trim().is_empty() {
                return Err(DomainError::InvalidSpec {
                    field: "general_instructions",
                    reason: "instruction keys must not be empty".into(),
                });
            }
        }
        Ok(())
    }
}

/// Where the project data lives. Only syntax is checked here; existence is
/// the sandbox's concern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataLocation {
    Path(std::path::PathBuf),
    Uri(url::Url),
}

impl DataLocation {
    pub fn parse(raw: &str) -> Result<Self, String> {
        if raw.trim().is_empty() {
            return Err("must not be blank".into());
        }
        if raw.chars().any(|c| c.is_control()) {
            return Err("contains control characters".into());
        }
        // Windows drive letters ("C:\data") parse as a one-letter URI scheme.
        let looks_like_uri = raw
            .split_once(':')
            .map(|(scheme, _)| {
                scheme.len() > 1
                    && scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                    && scheme
                        .chars()
                        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
            })
            .unwrap_or(false);
        if looks_like_uri {
            return url::Url::parse(raw)
                .map(DataLocation::Uri)
                .map_err(|e| format!("not a valid URI: {e}"));
        }
        Ok(DataLocation::Path(raw.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Text,
    Code,
    Finish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionStatus {
    Success,
    Error,
    Timeout,
}

/// Outcome of one attempt at running a code cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub attempt: u32,
    pub status: ExecutionStatus,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    #[serde(default)]
    pub artifacts_written: Vec<String>,
}

impl ExecutionResult {
    pub fn is_success(&self) -> bool {
        self.status == ExecutionStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub id: u64,
    pub kind: CellKind,
    pub ordinal: u32,
    pub source: String,
    pub purpose_or_spec: String,
    #[serde(default)]
    pub results: Vec<ExecutionResult>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

impl Cell {
    /// The authoritative (last) execution result, if the cell ran.
    pub fn final_result(&self) -> Option<&ExecutionResult> {
        self.results.last()
    }

    pub fn succeeded(&self) -> bool {
        self.final_result().is_some_and(ExecutionResult::is_success)
    }

    pub fn failed(&self) -> bool {
        self.final_result().is_some_and(|r| !r.is_success())
    }

    /// "Text #3", "Code #5", "Finish #1".
    pub fn label(&self) -> String {
        let kind = match self.kind {
            CellKind::Text => "Text",
            CellKind::Code => "Code",
            CellKind::Finish => "Finish",
        };
        format!("{kind} #{}", self.ordinal)
    }
}

/// A validated routing decision from the orchestrator model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum OrchestratorAction {
    RequestText {
        spec: String,
    },
    RequestCode {
        purpose: String,
    },
    Finish {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        summary_hint: Option<String>,
    },
}

impl OrchestratorAction {
    pub fn name(&self) -> &'static str {
        match self {
            OrchestratorAction::RequestText { .. } => "request_text",
            OrchestratorAction::RequestCode { .. } => "request_code",
            OrchestratorAction::Finish { .. } => "finish",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolMode {
    NativeToolCalls,
    EmulatedJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSettings {
    #[serde(default)]
    pub model_id: String,
    pub temperature: f64,
}

impl AgentSettings {
    fn with_temperature(temperature: f64) -> Self {
        Self {
            model_id: String::new(),
            temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfigs {
    pub orchestrator: AgentSettings,
    pub text: AgentSettings,
    pub code: AgentSettings,
}

impl Default for AgentConfigs {
    fn default() -> Self {
        Self {
            orchestrator: AgentSettings::with_temperature(0.2),
            text: AgentSettings::with_temperature(0.4),
            code: AgentSettings::with_temperature(0.0),
        }
    }
}

/// Per-session run knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub max_steps: u32,
    pub max_code_retries: u32,
    pub history_char_limit: usize,
    pub head_tail_lines: usize,
    pub agents: AgentConfigs,
    pub tool_mode: ToolMode,
    pub cell_timeout_ms: u64,
    pub network_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_steps: 30,
            max_code_retries: 3,
            history_char_limit: 10_000,
            head_tail_lines: 20,
            agents: AgentConfigs::default(),
            tool_mode: ToolMode::NativeToolCalls,
            cell_timeout_ms: 120_000,
            network_enabled: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let invalid = |field, reason: &str| {
            Err(DomainError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        if self.max_steps == 0 {
            return invalid("max_steps", "must be positive");
        }
        if self.history_char_limit == 0 {
            return invalid("history_char_limit", "must be positive");
        }
        if self.head_tail_lines == 0 {
            return invalid("head_tail_lines", "must be positive");
        }
        if self.cell_timeout_ms == 0 {
            return invalid("cell_timeout_ms", "must be positive");
        }
        for (field, agent) in [
            ("agents.orchestrator.temperature", &self.agents.orchestrator),
            ("agents.text.temperature", &self.agents.text),
            ("agents.code.temperature", &self.agents.code),
        ] {
            if !(0.0..=2.0).contains(&agent.temperature) {
                return invalid(field, "must lie in [0, 2]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AwaitingNextStep,
    Finished,
    StoppedMaxSteps,
    Failed,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionStatus::Finished | SessionStatus::StoppedMaxSteps | SessionStatus::Failed
        )
    }
}

/// Which agent a render-size record was produced for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Orchestrator,
    TextAgent,
    CodeAgent,
}

impl AgentRole {
    pub const ALL: [AgentRole; 3] = [AgentRole::Orchestrator, AgentRole::TextAgent, AgentRole::CodeAgent];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Orchestrator => "orchestrator",
            AgentRole::TextAgent => "text_agent",
            AgentRole::CodeAgent => "code_agent",
        }
    }
}

/// One entry of the autorun trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Action {
        at: u64,
        step: u32,
        action: OrchestratorAction,
    },
    RenderSize {
        at: u64,
        step: u32,
        role: AgentRole,
        untruncated_chars: usize,
        emitted_chars: usize,
        truncated: bool,
    },
    Execution {
        at: u64,
        cell_id: u64,
        attempt: u32,
        status: ExecutionStatus,
        duration_ms: u64,
    },
    /// A code rewrite replaced `previous_source` on the given cell.
    Retry {
        at: u64,
        cell_id: u64,
        attempt: u32,
        previous_source: String,
    },
    ParseFailure {
        at: u64,
        step: u32,
        error: String,
        raw: String,
    },
    Note {
        at: u64,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub spec: ProjectSpec,
    pub config: RunConfig,
    pub cells: Vec<Cell>,
    pub status: SessionStatus,
    pub step_count: u32,
    pub trace: Vec<TraceRecord>,
}

impl Session {
    /// Creates an empty session with a random id.
    pub fn new(spec: ProjectSpec, config: RunConfig) -> Result<Self, DomainError> {
        Self::with_id(uuid::Uuid::new_v4().to_string(), spec, config)
    }

    pub fn with_id(session_id: impl Into<String>, spec: ProjectSpec, config: RunConfig) -> Result<Self, DomainError> {
        spec.validate()?;
        config.validate()?;
        Ok(Self {
            session_id: session_id.into(),
            spec,
            config,
            cells: Vec::new(),
            status: SessionStatus::Idle,
            step_count: 0,
            trace: Vec::new(),
        })
    }

    pub fn next_cell_id(&self) -> u64 {
        self.cells.last().map_or(1, |c| c.id + 1)
    }

    pub fn count_of(&self, kind: CellKind) -> u32 {
        self.cells.iter().filter(|c| c.kind == kind).count() as u32
    }

    /// Appends a cell; a Finish cell closes the session.
    pub fn append_cell(
        &mut self,
        kind: CellKind,
        source: impl Into<String>,
        purpose_or_spec: impl Into<String>,
        created_at: u64,
    ) -> Result<&mut Cell, DomainError> {
        if matches!(self.status, SessionStatus::Finished | SessionStatus::Failed) {
            return Err(DomainError::SessionClosed(self.status));
        }
        let cell = Cell {
            id: self.next_cell_id(),
            kind,
            ordinal: self.count_of(kind) + 1,
            source: source.into(),
            purpose_or_spec: purpose_or_spec.into(),
            results: Vec::new(),
            created_at,
        };
        self.cells.push(cell);
        if kind == CellKind::Finish {
            self.status = SessionStatus::Finished;
        }
        Ok(self.cells.last_mut().expect("cell just pushed"))
    }

    pub fn cell_mut(&mut self, id: u64) -> Option<&mut Cell> {
        self.cells.iter_mut().find(|c| c.id == id)
    }

    /// Clears the transcript and counters; spec and config are kept.
    pub fn reset(&mut self) {
        self.cells.clear();
        self.trace.clear();
        self.step_count = 0;
        self.status = SessionStatus::Idle;
    }

    /// Replaces the run config. Refused while a step is in flight or after
    /// the session is closed; raising `max_steps` on a stopped session makes
    /// it runnable again.
    pub fn update_config(&mut self, config: RunConfig) -> Result<(), DomainError> {
        if matches!(
            self.status,
            SessionStatus::Running | SessionStatus::Finished | SessionStatus::Failed
        ) {
            return Err(DomainError::SessionClosed(self.status));
        }
        config.validate()?;
        if config.max_steps < self.step_count {
            return Err(DomainError::InvalidConfig {
                field: "max_steps",
                reason: format!("below the {} steps already taken", self.step_count),
            });
        }
        if self.status == SessionStatus::StoppedMaxSteps && config.max_steps > self.step_count {
            self.status = SessionStatus::AwaitingNextStep;
        }
        self.config = config;
        Ok(())
    }
}

/// Source of wall-clock timestamps in milliseconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        chrono::Utc::now().timestamp_millis().max(0) as u64
    }
}

/// Deterministic clock: every reading advances by a fixed step. Used for
/// reproducible runs.
#[derive(Debug)]
pub struct StepClock {
    next: AtomicU64,
    step: u64,
}

impl StepClock {
    pub fn new(start_ms: u64, step_ms: u64) -> Self {
        Self {
            next: AtomicU64::new(start_ms),
            step: step_ms,
        }
    }
}

impl Clock for StepClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

pub type SharedClock = Arc<dyn Clock>;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session() -> Session {
        Session::with_id("s", ProjectSpec::new("T"), RunConfig::default()).unwrap()
    }

    #[test]
    fn new_session_starts_empty() {
        let s = session();
        assert!(s.cells.is_empty());
        assert_eq!(s.step_count, 0);
        assert_eq!(s.status, SessionStatus::Idle);
    }

    #[test]
    fn empty_task_description_is_invalid_spec() {
        let err = Session::new(ProjectSpec::new(""), RunConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            DomainError::InvalidSpec {
                field: "task_description",
                ..
            }
        ));
    }

    #[test]
    fn zero_max_steps_is_invalid_config() {
        let config = RunConfig {
            max_steps: 0,
            ..RunConfig::default()
        };
        let err = Session::new(ProjectSpec::new("T"), config).unwrap_err();
        assert!(matches!(err, DomainError::InvalidConfig { field: "max_steps", .. }));
    }

    #[test]
    fn temperature_out_of_range_is_rejected() {
        let mut config = RunConfig::default();
        config.agents.code.temperature = 2.5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn data_location_syntax() {
        assert!(DataLocation::parse("/data/train.csv").is_ok());
        assert!(DataLocation::parse("relative/dir").is_ok());
        assert!(DataLocation::parse("C:\\data").is_ok());
        assert!(matches!(
            DataLocation::parse("s3://bucket/key"),
            Ok(DataLocation::Uri(_))
        ));
        assert!(DataLocation::parse("http://exa mple.com/x").is_err());
        assert!(DataLocation::parse("bad\u{0}path").is_err());
    }

    #[test]
    fn first_text_cell() {
        let mut s = session();
        let cell = s.append_cell(CellKind::Text, "plan", "spec", 0).unwrap();
        assert_eq!((cell.id, cell.ordinal), (1, 1));
    }

    #[test]
    fn code_after_text_text_code_gets_ordinal_two() {
        let mut s = session();
        for kind in [CellKind::Text, CellKind::Text, CellKind::Code] {
            s.append_cell(kind, "", "", 0).unwrap();
        }
        let cell = s.append_cell(CellKind::Code, "", "", 0).unwrap();
        assert_eq!((cell.id, cell.ordinal), (4, 2));
    }

    #[test]
    fn append_to_finished_session_is_refused() {
        let mut s = session();
        s.append_cell(CellKind::Finish, "Finished: done", "", 0).unwrap();
        assert_eq!(s.status, SessionStatus::Finished);
        assert_eq!(
            s.append_cell(CellKind::Text, "", "", 0).unwrap_err(),
            DomainError::SessionClosed(SessionStatus::Finished)
        );
    }

    #[test]
    fn reset_semantics() {
        let mut fresh = session();
        let before = fresh.clone();
        fresh.reset();
        assert_eq!(fresh, before);

        let mut s = session();
        for _ in 0..5 {
            s.append_cell(CellKind::Text, "x", "", 0).unwrap();
        }
        s.step_count = 5;
        s.reset();
        assert!(s.cells.is_empty());
        assert_eq!(s.step_count, 0);

        let mut done = session();
        done.append_cell(CellKind::Finish, "", "", 0).unwrap();
        done.reset();
        assert_eq!(done.status, SessionStatus::Idle);
        assert!(done.cells.is_empty());
        assert_eq!(done.spec, ProjectSpec::new("T"));
    }

    #[test]
    fn raising_max_steps_reopens_stopped_session() {
        let mut s = session();
        s.step_count = 30;
        s.status = SessionStatus::StoppedMaxSteps;
        let raised = RunConfig {
            max_steps: 40,
            ..RunConfig::default()
        };
        s.update_config(raised).unwrap();
        assert_eq!(s.status, SessionStatus::AwaitingNextStep);

        let lowered = RunConfig {
            max_steps: 10,
            ..RunConfig::default()
        };
        assert!(s.update_config(lowered).is_err());
    }

    #[test]
    fn step_clock_advances() {
        let clock = StepClock::new(100, 5);
        assert_eq!(clock.now_ms(), 100);
        assert_eq!(clock.now_ms(), 105);
    }

    fn kind_strategy() -> impl Strategy<Value = CellKind> {
        prop_oneof![Just(CellKind::Text), Just(CellKind::Code)]
    }

    proptest! {
        #[test]
        fn ordinals_are_dense_per_kind(kinds in proptest::collection::vec(kind_strategy(), 0..40), finish in any::<bool>()) {
            let mut s = session();
            for kind in &kinds {
                s.append_cell(*kind, "", "", 0).unwrap();
            }
            if finish {
                s.append_cell(CellKind::Finish, "", "", 0).unwrap();
            }
            for kind in [CellKind::Text, CellKind::Code, CellKind::Finish] {
                let ordinals: Vec<u32> = s.cells.iter().filter(|c| c.kind == kind).map(|c| c.ordinal).collect();
                let expected: Vec<u32> = (1..=ordinals.len() as u32).collect();
                prop_assert_eq!(ordinals, expected);
            }
            prop_assert!(s.cells.windows(2).all(|w| w[0].id < w[1].id));
            prop_assert_eq!(s.status == SessionStatus::Finished, s.cells.last().is_some_and(|c| c.kind == CellKind::Finish));
        }
    }
}
