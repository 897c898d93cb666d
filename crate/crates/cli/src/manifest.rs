use std::path::{Path, PathBuf};

use serde::Serialize;

use membp_core::fmt::to_json_string;

use crate::CliError;

/// Provenance record written beside a command's outputs. Holds nothing that
/// varies between identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, flags: &impl Serialize, seed: u64, outputs: &[&Path]) -> Self {
        Self {
            command: command.to_string(),
            flags: serde_json::to_value(flags).expect("flag structs are always serializable"),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    pub fn write_beside(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(out);
        write(&path, to_json_string(self).expect("manifest is always serializable"))?;
        Ok(path)
    }
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}
