pub mod evaluate;
pub mod generate;
pub mod localize;
pub mod tune;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Prints one path per line; a closed stdout is not an error.
pub fn print_paths(paths: &[PathBuf]) {
    let mut out = std::io::stdout().lock();
    for p in paths {
        if writeln!(out, "{}", p.display()).is_err() {
            return;
        }
    }
}
