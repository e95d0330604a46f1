//! Reference history renderer, written straight from the six rendering
//! rules and kept independent of `nbagent_core::render`:
//!
//! 1. the user instructions come first;
//! 2. every text/code block is numbered and included in full;
//! 3. of past code blocks only successful ones are kept;
//! 4. successful blocks add the head of their stdout;
//! 5. a failing latest block adds the tail of its traceback;
//! 6. beyond the character limit only the most recent characters survive.

use nbagent_core::domain::{Cell, CellKind, ExecutionStatus, Session};

fn split_output(text: &str) -> Vec<String> {
    let mut pieces: Vec<String> = text.split('\n').map(str::to_owned).collect();
    if pieces.last().map(String::as_str) == Some("") {
        pieces.pop();
    }
    pieces
}

fn instructions(session: &Session) -> String {
    let spec = &session.spec;
    let mut lines = vec!["# Project summary".to_string()];
    if !spec.general_instructions.is_empty() {
        lines.push("## General instructions".into());
        lines.extend(
            spec.general_instructions
                .iter()
                .map(|i| format!("- {}: {}", i.key, i.value)),
        );
    }
    lines.push("## Task-specific instructions".into());
    let fields = [
        ("Task description", &spec.task_description),
        ("Data description", &spec.data_description),
        ("Data location", &spec.data_location),
        ("Metrics", &spec.metrics),
        ("Inputs", &spec.inputs),
        ("Outputs", &spec.outputs),
        ("Special instructions", &spec.special_instructions),
    ];
    for (name, value) in fields {
        if !value.is_empty() {
            lines.push(format!("{name}: {value}"));
        }
    }
    lines.join("\n") + "\n"
}

fn block(kind: &str, cell: &Cell, extra: Option<(&str, Vec<String>)>) -> String {
    let mut text = format!("{kind} #{}:\n{}\n", cell.ordinal, cell.source);
    if let Some((label, lines)) = extra {
        text += label;
        text += "\n";
        for line in lines {
            text += &line;
            text += "\n";
        }
    }
    text
}

pub fn reference_render(session: &Session, char_limit: usize, lines: usize) -> String {
    let mut pieces = vec![instructions(session)];
    let count = session.cells.len();
    for (index, cell) in session.cells.iter().enumerate() {
        let latest = index + 1 == count;
        let piece = match cell.kind {
            CellKind::Text => Some(block("Text", cell, None)),
            CellKind::Finish => Some(block("Finish", cell, None)),
            CellKind::Code => match cell.results.last() {
                None => Some(block("Code", cell, None)),
                Some(r) if r.status == ExecutionStatus::Success => {
                    let head: Vec<String> = split_output(&r.stdout).into_iter().take(lines).collect();
                    Some(block("Code", cell, Some(("Output (head):", head))))
                }
                Some(r) if latest => {
                    let all = split_output(&r.stderr);
                    let tail = all[all.len().saturating_sub(lines)..].to_vec();
                    Some(block("Code", cell, Some(("Error (tail):", tail))))
                }
                Some(_) => None,
            },
        };
        pieces.extend(piece);
    }
    let full = pieces.join("\n");
    let chars: Vec<char> = full.chars().collect();
    if chars.len() > char_limit {
        chars[chars.len() - char_limit..].iter().collect()
    } else {
        full
    }
}
