//! Deterministic artifact writers.
//!
//! Every artifact embeds the same four provenance fields — tool version,
//! system identifier, config fingerprint, master seed — as `#` comment lines
//! in CSV files and as a `meta` object in JSON files. Nothing else varies
//! between reruns: no timestamps, no hostnames, no float formatting drift
//! (values print in Rust's shortest round-trip form), so a rerun with the
//! same resolved configuration produces byte-identical files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Run;
use crate::CliError;

/// Provenance block shared by every artifact.
#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub tool_version: &'static str,
    pub system: &'static str,
    pub config_fingerprint: String,
    pub master_seed: u64,
}

impl Meta {
    pub fn of(run: &Run) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION"),
            system: run.system.id(),
            config_fingerprint: run.fingerprint.clone(),
            master_seed: run.master_seed,
        }
    }

    /// The provenance block as CSV comment lines.
    fn comment_lines(&self) -> String {
        format!(
            "# tool: quasipot {}\n# system: {}\n# config-fingerprint: {}\n# master-seed: {}\n",
            self.tool_version, self.system, self.config_fingerprint, self.master_seed
        )
    }
}

/// JSON envelope: provenance first, then the command's payload.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

/// Resolves `name` inside the run's output directory, creating it if needed.
pub fn out_path(run: &Run, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&run.out_dir).map_err(|e| {
        CliError::Computation(format!(
            "cannot create output directory {}: {e}",
            run.out_dir.display()
        ))
    })?;
    Ok(run.out_dir.join(name))
}

/// Writes a headered CSV: provenance comments, column row, data rows.
///
/// Extra context lines (`# key: value`) may precede the column row.
pub fn write_csv(
    run: &Run,
    path: &Path,
    extra_comments: &[String],
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CliError> {
    let mut text = Meta::of(run).comment_lines();
    for line in extra_comments {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&columns.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len(), "row width must match schema");
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Computation(format!("cannot write {}: {e}", path.display())))
}

/// Writes pretty-printed JSON with the provenance block under `meta`.
pub fn write_json<T: Serialize>(run: &Run, path: &Path, body: &T) -> Result<(), CliError> {
    let meta = Meta::of(run);
    let envelope = Envelope { meta: &meta, body };
    let mut text = serde_json::to_string_pretty(&envelope)
        .map_err(|e| CliError::Computation(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Computation(format!("cannot write {}: {e}", path.display())))
}

/// Shortest round-trip decimal form of a float (stable across reruns).
pub fn num(v: f64) -> String {
    format!("{v}")
}
