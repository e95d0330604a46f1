//! Project spec files. Two tables: free-form general instructions, kept in
//! file order, and the task-specific fields.
//!
//! ```toml
//! [general_instructions]
//! "Estimated steps" = "10-20"
//! "Plan verbosity" = "brief"
//!
//! [task]
//! task_description = "Predict passenger survival."
//! data_location = "/srv/data/titanic"
//! metrics = "Accuracy on the held-out split."
//! ```

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use nbagent_core::domain::{DomainError, Instruction, ProjectSpec};
use toml::{Table, Value};

const TASK_FIELDS: [&str; 7] = [
    "task_description",
    "data_description",
    "data_location",
    "metrics",
    "inputs",
    "outputs",
    "special_instructions",
];

fn scalar(value: &Value, field: &str) -> anyhow::Result<String> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(n) => Ok(n.to_string()),
        Value::Float(x) => Ok(x.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => bail!("{field}: expected a string"),
    }
}

pub fn parse_spec(text: &str) -> anyhow::Result<ProjectSpec> {
    let mut table: Table = text.parse().context("spec file is not valid TOML")?;
    let mut spec = ProjectSpec::default();

    if let Some(general) = table.remove("general_instructions") {
        let Value::Table(general) = general else {
            bail!("general_instructions: expected a table of key = value pairs");
        };
        for (key, value) in general {
            let value = scalar(&value, &format!("general_instructions.{key}"))?;
            spec.general_instructions.push(Instruction { key, value });
        }
    }

    let task = match table.remove("task") {
        Some(Value::Table(task)) => task,
        Some(_) => bail!("task: expected a table"),
        None => bail!("task: missing [task] table"),
    };
    if let Some(extra) = table.keys().next() {
        bail!("{extra}: unknown top-level key (expected general_instructions or task)");
    }
    for (key, value) in &task {
        let slot = match key.as_str() {
            "task_description" => &mut spec.task_description,
            "data_description" => &mut spec.data_description,
            "data_location" => &mut spec.data_location,
            "metrics" => &mut spec.metrics,
            "inputs" => &mut spec.inputs,
            "outputs" => &mut spec.outputs,
            "special_instructions" => &mut spec.special_instructions,
            other => bail!(
                "task.{other}: unknown field (expected one of {})",
                TASK_FIELDS.join(", ")
            ),
        };
        *slot = scalar(value, &format!("task.{key}"))?;
    }
    spec.validate().map_err(|e| match e {
        DomainError::InvalidSpec { field, reason } if field == "general_instructions" => anyhow!("{field}: {reason}"),
        DomainError::InvalidSpec { field, reason } => anyhow!("task.{field}: {reason}"),
        other => anyhow!(other),
    })?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> anyhow::Result<ProjectSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_spec(&text).with_context(|| format!("in {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_instruction_order() {
        let spec = parse_spec(
            "[general_instructions]\nzeta = \"last letter\"\nalpha = 1\n\n[task]\ntask_description = \"T\"\nmetrics = \"F1\"\n",
        )
        .unwrap();
        let keys: Vec<&str> = spec.general_instructions.iter().map(|i| i.key.as_str()).collect();
        assert_eq!(keys, ["zeta", "alpha"]);
        assert_eq!(spec.general_instructions[1].value, "1");
        assert_eq!(spec.metrics, "F1");
    }

    #[test]
    fn errors_name_the_field() {
        let empty = parse_spec("[task]\ntask_description = \"  \"\n")
            .unwrap_err()
            .to_string();
        assert!(empty.contains("task_description"), "{empty}");

        let unknown = parse_spec("[task]\ntask_description = \"T\"\nmetric = \"x\"\n").unwrap_err();
        assert!(unknown.to_string().starts_with("task.metric:"), "{unknown}");

        let nested = parse_spec("[task]\ntask_description = [\"x\"]\n").unwrap_err();
        assert!(nested.to_string().contains("task.task_description"));

        assert!(parse_spec("title = \"x\"\n[task]\ntask_description = \"T\"\n")
            .unwrap_err()
            .to_string()
            .contains("title"));
        assert!(parse_spec("").unwrap_err().to_string().contains("[task]"));
    }
}
