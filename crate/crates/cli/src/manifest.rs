//! Run manifests: a JSON record written next to every output, from which the
//! run can be repeated with `diffnet replay`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const TOOL: &str = "diffnet";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Resolved value of every flag, keyed by flag name without the dashes.
    pub flags: Map<String, Value>,
    pub seeds: BTreeMap<String, u64>,
    /// Values derived at run time (e.g. channel count read from the data).
    #[serde(default)]
    pub resolved: Map<String, Value>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(subcommand: &str, flags: &impl Serialize) -> Result<Self> {
        let flags = match serde_json::to_value(flags) {
            Ok(Value::Object(m)) => m,
            Ok(other) => return Err(CliError::Data(format!("flags serialized to {other}"))),
            Err(e) => return Err(CliError::Data(format!("manifest: {e}"))),
        };
        Ok(RunManifest {
            tool: TOOL.to_string(),
            version: VERSION.to_string(),
            subcommand: subcommand.to_string(),
            flags,
            seeds: BTreeMap::new(),
            resolved: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// The argument vector that re-runs this manifest's command.
    pub fn to_argv(&self) -> Result<Vec<OsString>> {
        let mut argv: Vec<OsString> = vec![TOOL.into(), self.subcommand.clone().into()];
        for (key, value) in &self.flags {
            let flag = format!("--{key}");
            let mut push = |v: &Value| -> Result<()> {
                argv.push(flag.clone().into());
                argv.push(scalar(key, v)?.into());
                Ok(())
            };
            match value {
                Value::Null => {}
                Value::Array(items) => items.iter().try_for_each(&mut push)?,
                v => push(v)?,
            }
        }
        Ok(argv)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn scalar(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(CliError::Usage(format!(
            "manifest flag {key} has unsupported value {v}"
        ))),
    }
}

/// Manifest path for a single-file output: `out.ext` → `out.ext.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}
