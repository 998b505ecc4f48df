//! Config loading and output-directory plumbing shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const HASH_FILE: &str = "config.sha256";

pub fn with_path<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| {
        CliError::Core(pointplanes::Error::File {
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = with_path(path, fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    with_path(path, fs::write(path, text))
}

/// Hex SHA-256 of the compact JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect())
}

/// Resolves `path` against the directory of the config file that named it.
pub fn resolve(base: &Path, path: &Path) -> Result<PathBuf> {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    };
    with_path(&joined, joined.canonicalize())
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = with_path(dir, fs::read_dir(dir))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Exists(dir.to_path_buf()));
        }
    }
    with_path(dir, fs::create_dir_all(dir))
}

/// Writes the resolved config and its hash into `dir`.
pub fn record_config<T: Serialize>(dir: &Path, config: &T) -> Result<String> {
    write_json(&dir.join(CONFIG_FILE), config)?;
    let hash = config_hash(config)?;
    with_path(&dir.join(HASH_FILE), fs::write(dir.join(HASH_FILE), format!("{hash}\n")))?;
    Ok(hash)
}

/// Rounds to 6 decimals so JSON and text tables print the same numbers.
pub fn round6(x: f64) -> f64 {
    if x.is_finite() {
        (x * 1e6).round() / 1e6
    } else {
        x
    }
}
