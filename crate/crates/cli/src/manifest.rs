//! Run manifests, config layering and atomic output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input data (exit 2).
    Parse(String),
    /// Invalid or inconsistent configuration (exit 3).
    Config(String),
    /// Numerical breakdown during a run (exit 4).
    Numerical(String),
    /// Filesystem failure (exit 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

pub fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(InputDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
}

/// Writes through a sibling temporary file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        write_atomic(&out_dir.join(MANIFEST_FILE), (text + "\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }
}

/// Recursively overlays `top` onto `base`; nulls in `top` are ignored.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (_, Value::Null) => {}
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        if !v.is_null() {
                            b.insert(k, v);
                        }
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves a command config from defaults, then the config-file section,
/// then explicit flags. Unknown keys are config errors.
pub fn resolve<C, F>(file_section: Option<&toml::Value>, flags: &F) -> Result<C, CliError>
where
    C: DeserializeOwned + Serialize + Default,
    F: Serialize,
{
    let mut value = to_json(&C::default())?;
    if let Some(section) = file_section {
        overlay(&mut value, to_json(section)?);
    }
    overlay(&mut value, to_json(flags)?);
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

fn to_json<S: Serialize + ?Sized>(v: &S) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

/// Reads a TOML config file: top-level `seed`, `out_dir`, `threads` and one
/// table per subcommand.
pub fn read_config_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.parse::<toml::Table>().map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}
