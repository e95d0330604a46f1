//! Budgeted textual projection of a session, shared as context by every
//! agent.
//!
//! Layout, in session order:
//!
//! ```text
//! # Project summary
//! ## General instructions
//! - key: value
//! ## Task-specific instructions
//! Task description: ...
//!
//! Text #1:
//! <source>
//!
//! Code #1:
//! <source>
//! Output (head):
//! <first N stdout lines>
//! ```
//!
//! Successful code cells show the head of their stdout. A failed code cell
//! is shown only while it is the last cell, with the tail of its stderr
//! under `Error (tail):`; earlier failed cells are dropped. When the text is
//! longer than the character limit only its final characters are kept.

use serde::{Deserialize, Serialize};

use crate::domain::{Cell, CellKind, ProjectSpec, RunConfig, Session};

pub const TEXT_LABEL: &str = "Text";
pub const CODE_LABEL: &str = "Code";
pub const FINISH_LABEL: &str = "Finish";
pub const OUTPUT_HEAD_LABEL: &str = "Output (head):";
pub const ERROR_TAIL_LABEL: &str = "Error (tail):";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub char_limit: usize,
    pub head_tail_lines: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            char_limit: 10_000,
            head_tail_lines: 20,
        }
    }
}

impl From<&RunConfig> for RenderOptions {
    fn from(config: &RunConfig) -> Self {
        Self {
            char_limit: config.history_char_limit,
            head_tail_lines: config.head_tail_lines,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSizeReport {
    pub untruncated_chars: usize,
    pub emitted_chars: usize,
    pub truncated: bool,
}

pub fn render_history(session: &Session, opts: RenderOptions) -> String {
    let full = render_untruncated(session, opts);
    keep_last_chars(&full, opts.char_limit).to_string()
}

pub fn render_size_report(session: &Session, opts: RenderOptions) -> RenderSizeReport {
    let untruncated_chars = render_untruncated(session, opts).chars().count();
    let emitted_chars = untruncated_chars.min(opts.char_limit);
    RenderSizeReport {
        untruncated_chars,
        emitted_chars,
        truncated: untruncated_chars > opts.char_limit,
    }
}

/// The full render before the character budget is applied.
pub fn render_untruncated(session: &Session, opts: RenderOptions) -> String {
    let mut out = render_spec_header(&session.spec);
    let last_id = session.cells.last().map(|c| c.id);
    for cell in &session.cells {
        let is_last = Some(cell.id) == last_id;
        if let Some(block) = render_cell(cell, is_last, opts.head_tail_lines) {
            out.push('\n');
            out.push_str(&block);
        }
    }
    out
}

pub fn render_spec_header(spec: &ProjectSpec) -> String {
    let mut out = String::from("# Project summary\n");
    if !spec.general_instructions.is_empty() {
        out.push_str("## General instructions\n");
        for item in &spec.general_instructions {
            out.push_str(&format!("- {}: {}\n", item.key, item.value));
        }
    }
    out.push_str("## Task-specific instructions\n");
    for (label, value) in spec.task_fields() {
        if !value.is_empty() {
            out.push_str(&format!("{label}: {value}\n"));
        }
    }
    out
}

fn render_cell(cell: &Cell, is_last: bool, lines: usize) -> Option<String> {
    let mut block = String::new();
    let heading = |label: &str| format!("{label} #{}:\n{}\n", cell.ordinal, cell.source);
    match cell.kind {
        CellKind::Text => block.push_str(&heading(TEXT_LABEL)),
        CellKind::Finish => block.push_str(&heading(FINISH_LABEL)),
        CellKind::Code => match cell.final_result() {
            // Not executed yet: the source is all there is.
            None => block.push_str(&heading(CODE_LABEL)),
            Some(result) if result.is_success() => {
                block.push_str(&heading(CODE_LABEL));
                push_section(&mut block, OUTPUT_HEAD_LABEL, &head_lines(&result.stdout, lines));
            }
            Some(result) if is_last => {
                block.push_str(&heading(CODE_LABEL));
                push_section(&mut block, ERROR_TAIL_LABEL, &tail_lines(&result.stderr, lines));
            }
            Some(_) => return None,
        },
    }
    Some(block)
}

fn push_section(block: &mut String, label: &str, lines: &[&str]) {
    block.push_str(label);
    block.push('\n');
    for line in lines {
        block.push_str(line);
        block.push('\n');
    }
}

/// Splits captured output into lines; a single trailing newline does not
/// start an extra empty line.
pub fn output_lines(text: &str) -> Vec<&str> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        Vec::new()
    } else {
        body.split('\n').collect()
    }
}

pub fn head_lines(text: &str, n: usize) -> Vec<&str> {
    output_lines(text).into_iter().take(n).collect()
}

pub fn tail_lines(text: &str, n: usize) -> Vec<&str> {
    let all = output_lines(text);
    let skip = all.len().saturating_sub(n);
    all[skip..].to_vec()
}

/// The final `limit` Unicode scalar values of `text`.
pub fn keep_last_chars(text: &str, limit: usize) -> &str {
    let total = text.chars().count();
    if total <= limit {
        return text;
    }
    let (offset, _) = text.char_indices().nth(total - limit).expect("index within bounds");
    &text[offset..]
}
