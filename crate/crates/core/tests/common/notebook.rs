//! Validation against JSON schemas: the published notebook format schema
//! (v4.5, vendored under tests/fixtures) and the run-file schema shipped in
//! docs/.

use jsonschema::{Draft, JSONSchema};
use serde_json::Value;

fn compile(raw: &str, draft: Draft) -> JSONSchema {
    let schema: Value = serde_json::from_str(raw).unwrap();
    JSONSchema::options()
        .with_draft(draft)
        .compile(&schema)
        .expect("schema compiles")
}

fn check(schema: &JSONSchema, bytes: &[u8]) -> Result<(), String> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    schema.validate(&doc).map_err(|errors| {
        errors
            .map(|e| format!("{} at {}", e, e.instance_path))
            .collect::<Vec<_>>()
            .join("; ")
    })
}

pub struct NotebookValidator(JSONSchema);

impl NotebookValidator {
    pub fn new() -> Self {
        Self(compile(
            include_str!("../fixtures/nbformat.v4.5.schema.json"),
            Draft::Draft4,
        ))
    }

    pub fn check(&self, bytes: &[u8]) -> Result<(), String> {
        check(&self.0, bytes)
    }
}

pub struct RunFileValidator(JSONSchema);

impl RunFileValidator {
    pub fn new() -> Self {
        Self(compile(
            include_str!("../../../../docs/run-file.v1.schema.json"),
            Draft::Draft7,
        ))
    }

    pub fn check(&self, bytes: &[u8]) -> Result<(), String> {
        check(&self.0, bytes)
    }
}
