//! Stateful code execution. Each session owns one persistent interpreter,
//! started either inside a container (`docker run -i`, network off by
//! default, data mounted read-only) or, for development, as a plain local
//! process. Cells travel over the interpreter's stdio using the framing in
//! [`protocol`].

pub mod protocol;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DataLocation, ExecutionResult, ExecutionStatus, SharedClock};
use protocol::{CellReply, CellRequest, ReplyStatus};

/// Source of the interpreter driver spoken to over stdio.
pub const DRIVER_SOURCE: &str = include_str!("../../kernel/driver.py");

const CONTAINER_WORKDIR: &str = "/workspace";
const CONTAINER_DATA: &str = "/data";
const CONTAINER_ASSETS: &str = "/assets";
const STDERR_LOG_LIMIT: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("container image {0} is not available")]
    ImageMissing(String),
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("data path {0} does not exist")]
    DataPathMissing(PathBuf),
    #[error("sandbox is not running")]
    SandboxDead,
    #[error("sandbox i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SandboxError {
    fn from(e: std::io::Error) -> Self {
        SandboxError::Io(e.to_string())
    }
}

fn default_docker() -> String {
    "docker".into()
}

fn default_python() -> String {
    "python3".into()
}

/// How the interpreter process is launched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuntimeSpec {
    /// An OCI runtime with a docker-compatible CLI.
    Docker {
        #[serde(default = "default_docker")]
        binary: String,
        image: String,
        /// Extra `run` flags, e.g. `--user 1000:1000` or `--memory 8g`.
        #[serde(default)]
        extra_args: Vec<String>,
    },
    /// A local interpreter with no isolation. For development and tests.
    Local {
        #[serde(default = "default_python")]
        python: String,
    },
}

/// Paths as seen by code running inside the sandbox.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodePaths {
    pub assets_dir: String,
    pub data_dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxHandle {
    pub session_id: String,
    pub container_id: String,
    pub workspace_mount: PathBuf,
    pub data_mount: Option<PathBuf>,
    pub assets_mount: PathBuf,
    pub alive: bool,
}

/// What the orchestrator needs from an executor.
pub trait CellExecutor: Send {
    fn execute(&mut self, source: &str, timeout_ms: u64) -> Result<ExecutionResult, SandboxError>;
    /// Discards interpreter state.
    fn reset(&mut self) -> Result<(), SandboxError>;
    fn code_paths(&self) -> CodePaths;
}

struct Interpreter {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<std::io::Result<CellReply>>,
    stderr_log: Arc<Mutex<String>>,
}

impl Interpreter {
    fn stderr_tail(&self) -> String {
        self.stderr_log.lock().map(|s| s.clone()).unwrap_or_default()
    }
}

pub struct Sandbox {
    handle: SandboxHandle,
    runtime: RuntimeSpec,
    network_enabled: bool,
    interpreter: Option<Interpreter>,
    generation: u32,
    next_cell_id: u64,
    clock: SharedClock,
    _workspace: tempfile::TempDir,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("handle", &self.handle)
            .field("runtime", &self.runtime)
            .finish_non_exhaustive()
    }
}

/// Options for [`Sandbox::open`].
#[derive(Debug, Clone)]
pub struct SandboxOptions {
    pub runtime: RuntimeSpec,
    pub network_enabled: bool,
    pub assets_dir: PathBuf,
}

impl Sandbox {
    pub fn open(
        session_id: &str,
        data_location: &str,
        options: SandboxOptions,
        clock: SharedClock,
    ) -> Result<Self, SandboxError> {
        let data_mount = resolve_data_path(data_location)?;
        preflight(&options.runtime)?;
        std::fs::create_dir_all(&options.assets_dir)?;
        let workspace = tempfile::Builder::new().prefix("nbagent-ws-").tempdir()?;
        let mut sandbox = Self {
            handle: SandboxHandle {
                session_id: session_id.to_string(),
                container_id: String::new(),
                workspace_mount: workspace.path().to_path_buf(),
                data_mount,
                assets_mount: options.assets_dir,
                alive: true,
            },
            runtime: options.runtime,
            network_enabled: options.network_enabled,
            interpreter: None,
            generation: 0,
            next_cell_id: 1,
            clock,
            _workspace: workspace,
        };
        sandbox.start_interpreter()?;
        Ok(sandbox)
    }

    pub fn handle(&self) -> &SandboxHandle {
        &self.handle
    }

    fn container_name(&self) -> String {
        let session: String = self
            .handle
            .session_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("nbagent-{session}-{}", self.generation)
    }

    fn start_interpreter(&mut self) -> Result<(), SandboxError> {
        self.generation += 1;
        let name = self.container_name();
        let mut command = match &self.runtime {
            RuntimeSpec::Local { python } => {
                let mut cmd = Command::new(python);
                cmd.args(["-u", "-c", DRIVER_SOURCE])
                    .current_dir(&self.handle.workspace_mount)
                    .env("MPLBACKEND", "Agg");
                self.handle.container_id = format!("local-{}", self.generation);
                cmd
            }
            RuntimeSpec::Docker {
                binary,
                image,
                extra_args,
            } => {
                let mut cmd = Command::new(binary);
                cmd.args(docker_run_args(
                    &name,
                    &self.handle,
                    self.network_enabled,
                    extra_args,
                    image,
                ));
                self.handle.container_id = name;
                cmd
            }
        };
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SandboxError::RuntimeUnavailable(e.to_string()))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");

        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            match protocol::read_frame::<_, CellReply>(&mut stdout) {
                Ok(Some(reply)) => {
                    if tx.send(Ok(reply)).is_err() {
                        return;
                    }
                }
                Ok(None) => return,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        });
        let stderr_log = Arc::new(Mutex::new(String::new()));
        let log = Arc::clone(&stderr_log);
        std::thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = stderr.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let chunk = String::from_utf8_lossy(&buf[..n]);
                log::debug!(target: "nbagent::sandbox", "{}", chunk.trim_end());
                if let Ok(mut log) = log.lock() {
                    log.push_str(&chunk);
                    if log.len() > STDERR_LOG_LIMIT {
                        let mut cut = log.len() - STDERR_LOG_LIMIT;
                        while !log.is_char_boundary(cut) {
                            cut += 1;
                        }
                        log.drain(..cut);
                    }
                }
            }
        });
        self.interpreter = Some(Interpreter {
            child,
            stdin,
            replies: rx,
            stderr_log,
        });
        Ok(())
    }

    fn stop_interpreter(&mut self) {
        if let Some(mut interpreter) = self.interpreter.take() {
            if let RuntimeSpec::Docker { binary, .. } = &self.runtime {
                let removed = Command::new(binary)
                    .args(["rm", "-f", &self.handle.container_id])
                    .stdout(Stdio::null())
                    .stderr(Stdio::null())
                    .status();
                if let Err(e) = removed {
                    log::warn!("failed to remove container {}: {e}", self.handle.container_id);
                }
            }
            let _ = interpreter.child.kill();
            let _ = interpreter.child.wait();
        }
    }

    fn restart_interpreter(&mut self) -> Result<(), SandboxError> {
        self.stop_interpreter();
        self.start_interpreter().inspect_err(|_| {
            self.handle.alive = false;
        })
    }

    pub fn execute_cell(&mut self, source: &str, timeout_ms: u64) -> Result<ExecutionResult, SandboxError> {
        if !self.handle.alive {
            return Err(SandboxError::SandboxDead);
        }
        if self.interpreter.is_none() {
            self.restart_interpreter()?;
        }
        let id = self.next_cell_id;
        self.next_cell_id += 1;
        let before = scan_files(&self.handle.assets_mount);
        let started = self.clock.now_ms();

        let interpreter = self.interpreter.as_mut().expect("interpreter running");
        let sent = protocol::write_frame(
            &mut interpreter.stdin,
            &CellRequest {
                id,
                source: source.to_string(),
            },
        );
        let outcome = match sent {
            Ok(()) => wait_for_reply(&interpreter.replies, id, Duration::from_millis(timeout_ms)),
            Err(e) => Waited::Crashed(e.to_string()),
        };

        let (status, stdout, stderr) = match outcome {
            Waited::Reply(reply) => {
                let status = match reply.status {
                    ReplyStatus::Success => ExecutionStatus::Success,
                    ReplyStatus::Error => ExecutionStatus::Error,
                };
                let mut stderr = reply.stderr;
                if status == ExecutionStatus::Error && stderr.is_empty() {
                    stderr = "error\n".into();
                }
                (status, reply.stdout, stderr)
            }
            Waited::TimedOut => {
                self.restart_interpreter()?;
                (
                    ExecutionStatus::Timeout,
                    String::new(),
                    format!(
                        "Cell timed out after {timeout_ms} ms; the interpreter was restarted and \
                         session variables were lost.\n"
                    ),
                )
            }
            Waited::Crashed(why) => {
                let log = self
                    .interpreter
                    .as_ref()
                    .map(Interpreter::stderr_tail)
                    .unwrap_or_default();
                self.restart_interpreter()?;
                (
                    ExecutionStatus::Error,
                    String::new(),
                    format!(
                        "The interpreter exited unexpectedly ({why}); it was restarted and session \
                         variables were lost.\n{log}"
                    ),
                )
            }
        };
        let duration_ms = self.clock.now_ms().saturating_sub(started);
        let after = scan_files(&self.handle.assets_mount);
        Ok(ExecutionResult {
            attempt: 1,
            status,
            stdout,
            stderr,
            duration_ms,
            artifacts_written: changed_files(&before, &after),
        })
    }

    /// Relative paths and sizes of every file under the workspace and assets
    /// mounts. Never includes file contents.
    pub fn snapshot_state_digest(&self) -> Result<String, SandboxError> {
        if !self.handle.alive {
            return Err(SandboxError::SandboxDead);
        }
        let mut lines = Vec::new();
        for (label, root) in [
            ("workspace", &self.handle.workspace_mount),
            ("assets", &self.handle.assets_mount),
        ] {
            for (path, entry) in scan_files(root) {
                lines.push(format!("{label}/{path} {}", entry.size));
            }
        }
        Ok(lines.join("\n"))
    }

    /// Stops and removes the interpreter. Idempotent.
    pub fn close(&mut self) {
        if !self.handle.alive {
            return;
        }
        self.stop_interpreter();
        self.handle.alive = false;
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        self.close();
    }
}

impl CellExecutor for Sandbox {
    fn execute(&mut self, source: &str, timeout_ms: u64) -> Result<ExecutionResult, SandboxError> {
        self.execute_cell(source, timeout_ms)
    }

    fn reset(&mut self) -> Result<(), SandboxError> {
        if !self.handle.alive {
            return Err(SandboxError::SandboxDead);
        }
        self.restart_interpreter()
    }

    fn code_paths(&self) -> CodePaths {
        match &self.runtime {
            RuntimeSpec::Docker { .. } => CodePaths {
                assets_dir: CONTAINER_ASSETS.into(),
                data_dir: match &self.handle.data_mount {
                    Some(path) if path.is_file() => format!(
                        "{CONTAINER_DATA}/{}",
                        path.file_name().unwrap_or_default().to_string_lossy()
                    ),
                    Some(_) => CONTAINER_DATA.into(),
                    None => "(no data mounted)".into(),
                },
            },
            RuntimeSpec::Local { .. } => CodePaths {
                assets_dir: self.handle.assets_mount.display().to_string(),
                data_dir: self
                    .handle
                    .data_mount
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "(no data mounted)".into()),
            },
        }
    }
}

enum Waited {
    Reply(CellReply),
    TimedOut,
    Crashed(String),
}

fn wait_for_reply(replies: &Receiver<std::io::Result<CellReply>>, id: u64, timeout: Duration) -> Waited {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        let remaining = deadline.saturating_duration_since(std::time::Instant::now());
        match replies.recv_timeout(remaining) {
            Ok(Ok(reply)) if reply.id == id => return Waited::Reply(reply),
            // A reply to an earlier cell; keep waiting for ours.
            Ok(Ok(_)) => continue,
            Ok(Err(e)) => return Waited::Crashed(e.to_string()),
            Err(RecvTimeoutError::Timeout) => return Waited::TimedOut,
            Err(RecvTimeoutError::Disconnected) => return Waited::Crashed("end of stream".into()),
        }
    }
}

fn resolve_data_path(data_location: &str) -> Result<Option<PathBuf>, SandboxError> {
    if data_location.trim().is_empty() {
        return Ok(None);
    }
    let path = match DataLocation::parse(data_location) {
        Ok(DataLocation::Path(path)) => path,
        Ok(DataLocation::Uri(uri)) if uri.scheme() == "file" => uri
            .to_file_path()
            .map_err(|_| SandboxError::DataPathMissing(data_location.into()))?,
        // Remote data is fetched by code, not mounted.
        Ok(DataLocation::Uri(_)) => return Ok(None),
        Err(_) => return Err(SandboxError::DataPathMissing(data_location.into())),
    };
    std::fs::canonicalize(&path)
        .map(Some)
        .map_err(|_| SandboxError::DataPathMissing(path))
}

fn preflight(runtime: &RuntimeSpec) -> Result<(), SandboxError> {
    let run = |program: &str, args: &[&str]| {
        Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .output()
            .map_err(|e| SandboxError::RuntimeUnavailable(format!("{program}: {e}")))
    };
    match runtime {
        RuntimeSpec::Local { python } => {
            let out = run(python, &["-c", "import sys"])?;
            if !out.status.success() {
                return Err(SandboxError::RuntimeUnavailable(format!("{python} failed to start")));
            }
        }
        RuntimeSpec::Docker { binary, image, .. } => {
            let out = run(binary, &["version"])?;
            if !out.status.success() {
                return Err(SandboxError::RuntimeUnavailable(
                    String::from_utf8_lossy(&out.stderr).trim().to_string(),
                ));
            }
            let out = run(binary, &["image", "inspect", image])?;
            if !out.status.success() {
                return Err(SandboxError::ImageMissing(image.clone()));
            }
        }
    }
    Ok(())
}

/// Probes a runtime without starting a sandbox.
pub fn runtime_reachable(runtime: &RuntimeSpec) -> Result<(), SandboxError> {
    preflight(runtime)
}

fn docker_run_args(
    name: &str,
    handle: &SandboxHandle,
    network_enabled: bool,
    extra_args: &[String],
    image: &str,
) -> Vec<String> {
    let mut args: Vec<String> = vec!["run".into(), "-i".into(), "--rm".into(), "--name".into(), name.into()];
    if !network_enabled {
        args.extend(["--network".into(), "none".into()]);
    }
    args.extend([
        "-v".into(),
        format!("{}:{CONTAINER_WORKDIR}", handle.workspace_mount.display()),
        "-w".into(),
        CONTAINER_WORKDIR.into(),
        "-v".into(),
        format!("{}:{CONTAINER_ASSETS}", handle.assets_mount.display()),
        "-e".into(),
        "MPLBACKEND=Agg".into(),
    ]);
    if let Some(data) = &handle.data_mount {
        let target = if data.is_file() {
            format!(
                "{CONTAINER_DATA}/{}",
                data.file_name().unwrap_or_default().to_string_lossy()
            )
        } else {
            CONTAINER_DATA.to_string()
        };
        args.extend(["-v".into(), format!("{}:{target}:ro", data.display())]);
    }
    args.extend(extra_args.iter().cloned());
    args.extend([
        image.to_string(),
        "python3".into(),
        "-u".into(),
        "-c".into(),
        DRIVER_SOURCE.into(),
    ]);
    args
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FileEntry {
    size: u64,
    modified: Option<SystemTime>,
}

fn scan_files(root: &Path) -> BTreeMap<String, FileEntry> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            let meta = e.metadata().ok()?;
            let rel = e.path().strip_prefix(root).ok()?;
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            Some((
                rel,
                FileEntry {
                    size: meta.len(),
                    modified: meta.modified().ok(),
                },
            ))
        })
        .collect()
}

fn changed_files(before: &BTreeMap<String, FileEntry>, after: &BTreeMap<String, FileEntry>) -> Vec<String> {
    after
        .iter()
        .filter(|(path, entry)| before.get(*path) != Some(entry))
        .map(|(path, _)| path.clone())
        .collect()
}
