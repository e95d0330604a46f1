//! Engine for agent-driven data-science notebooks. An orchestrator model
//! routes each step to a text or code agent; code runs in a persistent
//! sandboxed interpreter. Every agent sees the same budgeted rendering of
//! the session so far.

pub mod assets;
pub mod domain;
pub mod gateway;
pub mod orchestrator;
pub mod prompts;
pub mod render;
pub mod sandbox;

pub use domain::{
    AgentRole, Cell, CellKind, Clock, ExecutionResult, ExecutionStatus, OrchestratorAction, ProjectSpec, RunConfig,
    Session, SessionStatus, StepClock, SystemClock, ToolMode, TraceRecord,
};
pub use orchestrator::{Engine, EngineEvent, StepError, StepOutcome};
