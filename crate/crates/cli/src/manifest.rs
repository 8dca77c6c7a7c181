//! JSON manifests written next to every artifact.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

pub struct Manifest {
    pub command: &'static str,
    pub digest: String,
    pub outputs: Vec<PathBuf>,
    pub results: Value,
}

impl Manifest {
    pub fn write(&self, path: &Path, cfg: &RunConfig, args: &[String], started: Instant) -> Result<(), CliError> {
        let config: Map<String, Value> =
            cfg.entries().into_iter().map(|(k, v)| (k.to_owned(), Value::String(v))).collect();
        let doc = json!({
            "command": self.command,
            "args": args,
            "seed": cfg.seed,
            "config_digest": self.digest,
            "config": config,
            "versions": {
                "drr_lab": env!("CARGO_PKG_VERSION"),
                "drr_core": drr_core::VERSION,
                "format": FORMAT_VERSION,
            },
            "outputs": self.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "results": self.results,
            "wall_time_seconds": started.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_file(path, &(text + "\n"))
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Reads the manifest of `artifact` and checks its digest. A mismatch is an
/// error unless `force` is set, in which case it is only reported.
pub fn check_prerequisite(artifact: &Path, expected: &str, force: bool, hint: &str) -> Result<Value, CliError> {
    if !artifact.exists() {
        return Err(CliError::Missing(format!("{} not found; run `{hint}` first", artifact.display())));
    }
    let mpath = manifest_path(artifact);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|_| CliError::Missing(format!("{} not found; run `{hint}` first", mpath.display())))?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Missing(format!("unreadable manifest {}: {e}", mpath.display())))?;
    let found = doc.get("config_digest").and_then(Value::as_str).unwrap_or("");
    if found != expected {
        let msg = format!(
            "{} was built with a different configuration (digest {found}, expected {expected}); rerun `{hint}` or pass --force",
            artifact.display()
        );
        if !force {
            return Err(CliError::Missing(msg));
        }
        eprintln!("drr-lab: warning: {msg}");
    }
    Ok(doc)
}
