//! Command-line entry points.
//!
//! Exit codes for `run`: 0 finished, 1 stopped at the step limit, 2 failed
//! or aborted by a runtime error, 3 configuration or environment problem.
//! `diagnose` exits 0 when every probe passes and 3 otherwise.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nbagent_core::domain::{RunConfig, Session, SessionStatus, SystemClock, ToolMode};

use crate::config::ServiceConfig;
use crate::diagnostics::run_diagnostics;
use crate::runner;
use crate::service::{self, AppState};
use crate::spec_file::load_spec;

pub const EXIT_FINISHED: i32 = 0;
pub const EXIT_MAX_STEPS: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "nbagent",
    version,
    about = "Agentic notebook generation for data-science tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Autorun one project spec headless and write its exports.
    Run(Box<RunArgs>),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "nbagent.toml")]
        config: PathBuf,
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Probe backends, container runtime and assets directory.
    Diagnose {
        #[arg(long, default_value = "nbagent.toml")]
        config: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ToolModeArg {
    NativeToolCalls,
    EmulatedJson,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Project spec file (TOML).
    pub spec: PathBuf,
    #[arg(long, default_value = "nbagent.toml")]
    pub config: PathBuf,
    /// Session id, also the assets subdirectory name. Random by default.
    #[arg(long)]
    pub session_id: Option<String>,
    #[command(flatten)]
    pub overrides: RunConfigArgs,
}

/// Flags named after the run config fields they override.
#[derive(Debug, Default, Args)]
pub struct RunConfigArgs {
    #[arg(long)]
    pub max_steps: Option<u32>,
    #[arg(long)]
    pub max_code_retries: Option<u32>,
    #[arg(long)]
    pub history_char_limit: Option<usize>,
    #[arg(long)]
    pub head_tail_lines: Option<usize>,
    #[arg(long, value_enum)]
    pub tool_mode: Option<ToolModeArg>,
    #[arg(long)]
    pub cell_timeout_ms: Option<u64>,
    #[arg(long)]
    pub network_enabled: Option<bool>,
    #[arg(long)]
    pub orchestrator_model_id: Option<String>,
    #[arg(long)]
    pub orchestrator_temperature: Option<f64>,
    #[arg(long)]
    pub text_model_id: Option<String>,
    #[arg(long)]
    pub text_temperature: Option<f64>,
    #[arg(long)]
    pub code_model_id: Option<String>,
    #[arg(long)]
    pub code_temperature: Option<f64>,
}

impl RunConfigArgs {
    pub fn apply(&self, config: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        set(&mut config.max_steps, &self.max_steps);
        set(&mut config.max_code_retries, &self.max_code_retries);
        set(&mut config.history_char_limit, &self.history_char_limit);
        set(&mut config.head_tail_lines, &self.head_tail_lines);
        set(&mut config.cell_timeout_ms, &self.cell_timeout_ms);
        set(&mut config.network_enabled, &self.network_enabled);
        set(&mut config.agents.orchestrator.model_id, &self.orchestrator_model_id);
        set(
            &mut config.agents.orchestrator.temperature,
            &self.orchestrator_temperature,
        );
        set(&mut config.agents.text.model_id, &self.text_model_id);
        set(&mut config.agents.text.temperature, &self.text_temperature);
        set(&mut config.agents.code.model_id, &self.code_model_id);
        set(&mut config.agents.code.temperature, &self.code_temperature);
        if let Some(mode) = self.tool_mode {
            config.tool_mode = match mode {
                ToolModeArg::NativeToolCalls => ToolMode::NativeToolCalls,
                ToolModeArg::EmulatedJson => ToolMode::EmulatedJson,
            };
        }
    }
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Serve { config, listen } => serve(&config, listen),
        Command::Diagnose { config, json } => diagnose(&config, json),
    }
}

fn config_error(e: anyhow::Error) -> i32 {
    eprintln!("error: {e:#}");
    EXIT_CONFIG
}

fn prepare_session(args: &RunArgs) -> anyhow::Result<(ServiceConfig, Session)> {
    let config = ServiceConfig::load(&args.config)?;
    let spec = load_spec(&args.spec)?;
    let mut run_config = config.session_defaults();
    args.overrides.apply(&mut run_config);
    let session = match &args.session_id {
        Some(id) => Session::with_id(id.clone(), spec, run_config),
        None => Session::new(spec, run_config),
    }?;
    Ok((config, session))
}

pub fn run(args: &RunArgs) -> i32 {
    let (config, mut session) = match prepare_session(args) {
        Ok(parts) => parts,
        Err(e) => return config_error(e),
    };
    let printer = Box::new(|event: &nbagent_core::EngineEvent| {
        if let Some(line) = runner::describe_event(event) {
            println!("{line}");
        }
    });
    let prepared = match runner::prepare(&config, &session, Arc::new(SystemClock), Some(printer)) {
        Ok(p) => p,
        Err(e) => return config_error(e),
    };
    let mut engine = prepared.engine;
    let outcome = engine.autorun(&mut session, &|| false);
    drop(engine);

    match runner::write_exports(&prepared.assets, &session) {
        Ok(paths) => {
            for path in paths {
                println!("wrote {}", prepared.assets.root().join(path).display());
            }
        }
        Err(e) => eprintln!("error: writing exports: {e:#}"),
    }
    if let Err(e) = outcome {
        eprintln!("error: run aborted: {e}");
        return EXIT_FAILED;
    }
    match session.status {
        SessionStatus::Finished => EXIT_FINISHED,
        SessionStatus::StoppedMaxSteps => {
            eprintln!("stopped after {} steps without finishing", session.step_count);
            EXIT_MAX_STEPS
        }
        other => {
            eprintln!("run ended with status {other:?}");
            EXIT_FAILED
        }
    }
}

fn serve(config_path: &Path, listen: Option<String>) -> i32 {
    let mut config = match ServiceConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(listen) = listen {
        config.listen = listen;
    }
    let report = run_diagnostics(&config);
    if !report.runtime.ok || !report.assets.ok {
        eprint!("{}", report.human());
        eprintln!("error: refusing to start");
        return EXIT_CONFIG;
    }
    for probe in report.backends.iter().filter(|p| !p.ok()) {
        log::warn!("backend {} not ready: {}", probe.role.as_str(), probe.report.detail);
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return config_error(e.into()),
    };
    let result = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        log::info!("listening on {}", listener.local_addr()?);
        service::serve(listener, AppState::new(config)).await?;
        anyhow::Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => config_error(e),
    }
}

fn diagnose(config_path: &Path, json: bool) -> i32 {
    let config = match ServiceConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    let report = run_diagnostics(&config);
    if json {
        let mut value = serde_json::to_value(&report).expect("report serializes");
        value["ok"] = report.all_ok().into();
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        print!("{}", report.human());
    }
    if report.all_ok() {
        0
    } else {
        EXIT_CONFIG
    }
}
