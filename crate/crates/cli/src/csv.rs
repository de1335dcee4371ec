//! `stage,mode,k,metric,value` reports with an embedded run manifest.
//!
//! The manifest occupies the leading rows (stage `manifest`): subcommand, tool
//! version, every resolved flag and the sha256 of every input file. Wall times
//! are not part of the CSV, so identical runs produce identical bytes; they go
//! to stderr instead.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Report {
    rows: Vec<[String; 5]>,
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl Report {
    pub fn new(subcommand: &str) -> Self {
        let mut r = Self::default();
        r.manifest("subcommand", subcommand);
        r.manifest("tool_version", env!("CARGO_PKG_VERSION"));
        r
    }

    pub fn manifest(&mut self, key: &str, value: impl ToString) {
        self.push("manifest", "", "", key, value.to_string());
    }

    pub fn flag(&mut self, name: &str, value: impl ToString) {
        self.manifest(&format!("flag.{name}"), value);
    }

    /// Records the input's digest under its path as given on the command line.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(path))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        self.manifest(&format!("input.sha256.{}", path.display()), digest);
        Ok(())
    }

    pub fn push(&mut self, stage: &str, mode: &str, k: &str, metric: &str, value: impl ToString) {
        self.rows.push([
            stage.into(),
            mode.into(),
            k.into(),
            metric.into(),
            value.to_string(),
        ]);
    }

    pub fn metric(&mut self, stage: &str, mode: &str, metric: &str, value: f64) {
        self.push(stage, mode, "", metric, value);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,mode,k,metric,value\n");
        for row in &self.rows {
            let fields: Vec<String> = row.iter().map(|f| escape(f)).collect();
            writeln!(out, "{}", fields.join(",")).unwrap();
        }
        out
    }
}
