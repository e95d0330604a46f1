//! Environment probes: model backends, container runtime, assets directory.

use std::fmt::Write as _;

use nbagent_core::domain::AgentRole;
use nbagent_core::gateway::DiagnosticReport;
use nbagent_core::sandbox::runtime_reachable;
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProbe {
    pub role: AgentRole,
    #[serde(flatten)]
    pub report: DiagnosticReport,
}

impl BackendProbe {
    /// Reachable and, where a credential applies, accepted.
    pub fn ok(&self) -> bool {
        self.report.reachable && self.report.auth != Some(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub backends: Vec<BackendProbe>,
    pub runtime: Probe,
    pub assets: Probe,
}

impl Report {
    pub fn all_ok(&self) -> bool {
        self.backends.iter().all(BackendProbe::ok) && self.runtime.ok && self.assets.ok
    }

    pub fn human(&self) -> String {
        let mark = |ok: bool| if ok { "ok  " } else { "FAIL" };
        let mut out = String::new();
        for probe in &self.backends {
            let r = &probe.report;
            let auth = match r.auth {
                Some(true) => "auth ok",
                Some(false) => "auth rejected",
                None => "auth unknown",
            };
            let latency = r.latency_ms.map(|ms| format!(", {ms} ms")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{} backend {:<12} {}{latency}: {}",
                mark(probe.ok()),
                probe.role.as_str(),
                if r.reachable { auth } else { "unreachable" },
                r.detail
            );
        }
        let _ = writeln!(
            out,
            "{} container runtime: {}",
            mark(self.runtime.ok),
            self.runtime.detail
        );
        let _ = writeln!(out, "{} assets directory: {}", mark(self.assets.ok), self.assets.detail);
        out
    }
}

fn probe_assets(config: &ServiceConfig) -> Probe {
    let root = &config.assets_root;
    let result = std::fs::create_dir_all(root).and_then(|_| tempfile::tempfile_in(root).map(drop));
    match result {
        Ok(()) => Probe {
            ok: true,
            detail: format!("{} is writable", root.display()),
        },
        Err(e) => Probe {
            ok: false,
            detail: format!("{}: {e}", root.display()),
        },
    }
}

/// Runs every probe. Never fails; failures are carried in the report.
pub fn run_diagnostics(config: &ServiceConfig) -> Report {
    let backends = AgentRole::ALL
        .into_iter()
        .map(|role| {
            let report = match config.backend(role) {
                Ok(backend) => backend.diagnose(role.as_str()),
                Err(e) => DiagnosticReport {
                    backend_id: role.as_str().to_string(),
                    reachable: false,
                    auth: None,
                    latency_ms: None,
                    detail: format!("{e:#}"),
                },
            };
            BackendProbe { role, report }
        })
        .collect();
    let runtime = match runtime_reachable(&config.sandbox) {
        Ok(()) => Probe {
            ok: true,
            detail: "reachable".into(),
        },
        Err(e) => Probe {
            ok: false,
            detail: e.to_string(),
        },
    };
    Report {
        backends,
        runtime,
        assets: probe_assets(config),
    }
}
