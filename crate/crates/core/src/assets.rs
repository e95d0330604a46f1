//! Persistence: canonical run files, Markdown and notebook exports, and the
//! per-session assets directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::domain::{Cell, CellKind, ExecutionStatus, ProjectSpec, RunConfig, Session, SessionStatus, TraceRecord};

pub const FORMAT_VERSION: u32 = 1;

pub const SPEC_FILE: &str = "spec.json";
pub const METRICS_FILE: &str = "metrics.ndjson";
pub const MODEL_CARD_FILE: &str = "model_card.md";
pub const DEBUG_LOG_FILE: &str = "debug.log";
pub const PLOTS_DIR: &str = "plots";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Error)]
pub enum AssetsError {
    #[error("unsupported run file format_version {0}")]
    VersionUnknown(u64),
    #[error("run file schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(path: impl Into<String>, reason: impl Into<String>) -> AssetsError {
    AssetsError::SchemaViolation {
        path: path.into(),
        reason: reason.into(),
    }
}

/// On-disk form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub format_version: u32,
    pub session_id: String,
    pub spec: ProjectSpec,
    pub config: RunConfig,
    pub cells: Vec<Cell>,
    pub status: SessionStatus,
    pub step_count: u32,
    pub trace: Vec<TraceRecord>,
}

impl From<&Session> for RunFile {
    fn from(s: &Session) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            session_id: s.session_id.clone(),
            spec: s.spec.clone(),
            config: s.config.clone(),
            cells: s.cells.clone(),
            status: s.status,
            step_count: s.step_count,
            trace: s.trace.clone(),
        }
    }
}

/// Canonical JSON: object keys sorted, two-space indentation, trailing
/// newline. Equal sessions give byte-equal output.
pub fn save_run(session: &Session) -> Vec<u8> {
    let value = serde_json::to_value(RunFile::from(session)).expect("run file serializes");
    canonical_json(&value)
}

pub fn canonical_json(value: &Value) -> Vec<u8> {
    // serde_json's default map is ordered by key.
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    bytes
}

pub fn load_run(bytes: &[u8]) -> Result<Session, AssetsError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| violation("", format!("not JSON: {e}")))?;
    let Value::Object(object) = &value else {
        return Err(violation("", "expected an object"));
    };
    match object.get("format_version") {
        Some(Value::Number(n)) => match n.as_u64() {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(AssetsError::VersionUnknown(v)),
            None => return Err(violation("/format_version", "expected a non-negative integer")),
        },
        Some(_) => return Err(violation("/format_version", "expected an integer")),
        None => return Err(violation("/format_version", "missing field")),
    }
    let run: RunFile = serde_path_to_error::deserialize(&value).map_err(|e| {
        let path = json_pointer(e.path());
        violation(path, e.into_inner().to_string())
    })?;
    check_run(&run)?;
    Ok(Session {
        session_id: run.session_id,
        spec: run.spec,
        config: run.config,
        cells: run.cells,
        status: match run.status {
            SessionStatus::Running => SessionStatus::AwaitingNextStep,
            other => other,
        },
        step_count: run.step_count,
        trace: run.trace,
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for segment in path.iter() {
        out.push('/');
        match segment {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// Session invariants that serde cannot express.
fn check_run(run: &RunFile) -> Result<(), AssetsError> {
    run.spec.validate().map_err(|e| violation("/spec", e.to_string()))?;
    run.config.validate().map_err(|e| violation("/config", e.to_string()))?;
    if run.step_count > run.config.max_steps {
        return Err(violation("/step_count", "exceeds config.max_steps"));
    }
    let mut counts = [0u32; 3];
    let mut last_id = 0u64;
    for (i, cell) in run.cells.iter().enumerate() {
        if cell.id <= last_id {
            return Err(violation(format!("/cells/{i}/id"), "cell ids must strictly increase"));
        }
        last_id = cell.id;
        let slot = &mut counts[cell.kind as usize];
        *slot += 1;
        if cell.ordinal != *slot {
            return Err(violation(format!("/cells/{i}/ordinal"), format!("expected {}", *slot)));
        }
        if cell.kind != CellKind::Code && !cell.results.is_empty() {
            return Err(violation(format!("/cells/{i}/results"), "only code cells have results"));
        }
        if cell.kind == CellKind::Finish && i + 1 != run.cells.len() {
            return Err(violation(format!("/cells/{i}/kind"), "finish must be the last cell"));
        }
        for (j, result) in cell.results.iter().enumerate() {
            if result.attempt as usize != j + 1 {
                return Err(violation(
                    format!("/cells/{i}/results/{j}/attempt"),
                    format!("expected {}", j + 1),
                ));
            }
            if result.status == ExecutionStatus::Error && result.stderr.is_empty() {
                return Err(violation(
                    format!("/cells/{i}/results/{j}/stderr"),
                    "an error result must carry stderr",
                ));
            }
        }
    }
    let ends_with_finish = run.cells.last().is_some_and(|c| c.kind == CellKind::Finish);
    if (run.status == SessionStatus::Finished) != ends_with_finish {
        return Err(violation(
            "/status",
            "status is finished iff the last cell is a finish cell",
        ));
    }
    Ok(())
}

/// A fence of backticks longer than any run inside `content`.
fn fence_for(content: &str) -> String {
    let longest = content.split(|c| c != '`').map(str::len).max().unwrap_or(0);
    "`".repeat(longest.max(2) + 1)
}

fn fenced(info: &str, content: &str) -> String {
    let fence = fence_for(content);
    let mut body = content.to_string();
    if !body.is_empty() && !body.ends_with('\n') {
        body.push('\n');
    }
    format!("{fence}{info}\n{body}{fence}\n")
}

fn is_image(path: &str) -> bool {
    let lower = path.to_ascii_lowercase();
    [".png", ".jpg", ".jpeg", ".gif", ".svg", ".webp"]
        .iter()
        .any(|ext| lower.ends_with(ext))
}

/// The displayed output of a code cell: stdout, or stderr when the final
/// attempt failed.
fn cell_output(cell: &Cell) -> String {
    match cell.final_result() {
        Some(r) if r.is_success() => r.stdout.clone(),
        Some(r) => r.stderr.clone(),
        None => String::new(),
    }
}

/// Markdown document of the session. Image artifacts are linked relative to
/// the `runs/` directory where exports are written.
pub fn export_markdown(session: &Session) -> String {
    let spec = &session.spec;
    let mut out = String::from("# Project summary\n\n");
    if !spec.general_instructions.is_empty() {
        out.push_str("## General instructions\n\n");
        for item in &spec.general_instructions {
            out.push_str(&format!("- **{}**: {}\n", item.key, item.value));
        }
        out.push('\n');
    }
    out.push_str("## Task-specific instructions\n\n");
    for (label, value) in spec.task_fields() {
        if !value.is_empty() {
            out.push_str(&format!("**{label}**: {value}\n\n"));
        }
    }
    for cell in &session.cells {
        out.push_str("---\n\n");
        match cell.kind {
            CellKind::Text => {
                out.push_str(&format!("### {}\n\n{}\n\n", cell.label(), cell.source.trim_end()));
            }
            CellKind::Code => {
                out.push_str(&format!("### {}\n\n", cell.label()));
                out.push_str(&fenced("python", &cell.source));
                out.push('\n');
                out.push_str(&fenced("text", &cell_output(cell)));
                out.push('\n');
                let images: Vec<&String> = cell
                    .final_result()
                    .map(|r| r.artifacts_written.iter().filter(|p| is_image(p)).collect())
                    .unwrap_or_default();
                for image in images {
                    out.push_str(&format!("![{image}](../{image})\n\n"));
                }
            }
            CellKind::Finish => {
                out.push_str(&format!("## Finished\n\n{}\n\n", cell.source.trim_end()));
            }
        }
    }
    out
}

/// Jupyter's list-of-lines form of a multiline string.
fn notebook_lines(text: &str) -> Value {
    Value::Array(
        text.split_inclusive('\n')
            .map(|line| Value::String(line.to_string()))
            .collect(),
    )
}

/// A notebook (format 4.5) with markdown cells for text and finish cells and
/// code cells carrying their stream outputs.
pub fn export_notebook(session: &Session) -> Vec<u8> {
    let mut code_ordinal = 0u32;
    let cells: Vec<Value> = session
        .cells
        .iter()
        .map(|cell| {
            let id = format!("cell-{}", cell.id);
            match cell.kind {
                CellKind::Text | CellKind::Finish => json!({
                    "cell_type": "markdown",
                    "id": id,
                    "metadata": {},
                    "source": notebook_lines(&cell.source),
                }),
                CellKind::Code => {
                    code_ordinal += 1;
                    let mut outputs = Vec::new();
                    if let Some(result) = cell.final_result() {
                        if !result.stdout.is_empty() {
                            outputs.push(json!({
                                "output_type": "stream",
                                "name": "stdout",
                                "text": notebook_lines(&result.stdout),
                            }));
                        }
                        if !result.is_success() && !result.stderr.is_empty() {
                            outputs.push(json!({
                                "output_type": "stream",
                                "name": "stderr",
                                "text": notebook_lines(&result.stderr),
                            }));
                        }
                    }
                    json!({
                        "cell_type": "code",
                        "id": id,
                        "metadata": {},
                        "execution_count": code_ordinal,
                        "source": notebook_lines(&cell.source),
                        "outputs": outputs,
                    })
                }
            }
        })
        .collect();
    let notebook = json!({
        "nbformat": 4,
        "nbformat_minor": 5,
        "metadata": {
            "kernelspec": {"name": "python3", "display_name": "Python 3", "language": "python"},
            "language_info": {"name": "python"},
        },
        "cells": cells,
    });
    canonical_json(&notebook)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssetKind {
    Spec,
    Metrics,
    ModelCard,
    DebugLog,
}

impl AssetKind {
    pub fn file_name(self) -> &'static str {
        match self {
            AssetKind::Spec => SPEC_FILE,
            AssetKind::Metrics => METRICS_FILE,
            AssetKind::ModelCard => MODEL_CARD_FILE,
            AssetKind::DebugLog => DEBUG_LOG_FILE,
        }
    }

    fn appends(self) -> bool {
        matches!(self, AssetKind::Metrics | AssetKind::DebugLog)
    }
}

/// One metrics record, stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub step: u32,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// Session-scoped output directory.
#[derive(Debug)]
pub struct AssetsDir {
    root: PathBuf,
    last_log_ms: Mutex<i64>,
}

impl AssetsDir {
    /// Opens `<assets_root>/<session_id>`, creating it with its fixed layout
    /// if needed. Creation happens in a scratch directory that is renamed
    /// into place, so a half-built layout is never visible.
    pub fn create(assets_root: &Path, session_id: &str) -> Result<Self, AssetsError> {
        if session_id.is_empty() || session_id.contains(['/', '\\']) || session_id.starts_with('.') {
            return Err(violation("/session_id", "not usable as a directory name"));
        }
        fs::create_dir_all(assets_root)?;
        let root = assets_root.join(session_id);
        if !root.exists() {
            let scratch = tempfile::Builder::new()
                .prefix(&format!(".{session_id}-"))
                .tempdir_in(assets_root)?;
            fs::create_dir(scratch.path().join(PLOTS_DIR))?;
            fs::create_dir(scratch.path().join(RUNS_DIR))?;
            fs::File::create(scratch.path().join(METRICS_FILE))?;
            fs::File::create(scratch.path().join(DEBUG_LOG_FILE))?;
            let scratch = scratch.keep();
            if let Err(e) = fs::rename(&scratch, &root) {
                let _ = fs::remove_dir_all(&scratch);
                if !root.is_dir() {
                    return Err(e.into());
                }
            }
        }
        Ok(Self {
            root,
            last_log_ms: Mutex::new(i64::MIN),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `content` to the kind's fixed file: metrics and the debug log
    /// append one record per call, spec and model card are replaced. Debug
    /// log entries are prefixed with a non-decreasing RFC 3339 timestamp.
    pub fn write_asset(&self, kind: AssetKind, content: &str) -> Result<String, AssetsError> {
        let path = self.root.join(kind.file_name());
        if kind.appends() {
            let mut record = match kind {
                AssetKind::DebugLog => format!("{} {}", self.log_timestamp(), content.trim_end()),
                _ => content.trim_end().to_string(),
            };
            record.push('\n');
            let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
            file.write_all(record.as_bytes())?;
        } else {
            let tmp = self.root.join(format!(".{}.tmp", kind.file_name()));
            fs::write(&tmp, content)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(kind.file_name().to_string())
    }

    pub fn append_metric(&self, record: &MetricRecord) -> Result<String, AssetsError> {
        let line = serde_json::to_string(record).expect("metric serializes");
        self.write_asset(AssetKind::Metrics, &line)
    }

    fn log_timestamp(&self) -> String {
        let mut last = self.last_log_ms.lock().expect("log clock");
        let now = chrono::Utc::now().timestamp_millis().max(*last);
        *last = now;
        chrono::DateTime::from_timestamp_millis(now)
            .expect("valid timestamp")
            .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    /// Writes a run export under `runs/` and returns its relative path.
    pub fn write_export(&self, file_name: &str, bytes: &[u8]) -> Result<String, AssetsError> {
        let rel = format!("{RUNS_DIR}/{file_name}");
        fs::write(self.root.join(&rel), bytes)?;
        Ok(rel)
    }

    /// Resolves a relative asset path, refusing anything that escapes the
    /// directory.
    pub fn resolve(&self, relative: &str) -> Option<PathBuf> {
        let rel = Path::new(relative);
        if rel.is_absolute() || rel.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return None;
        }
        Some(self.root.join(rel))
    }
}
