//! Output placement. Existing results are never overwritten: a taken path
//! gets a numeric suffix instead.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

fn with_suffix(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{k}"),
    };
    path.with_file_name(name)
}

/// `path`, or the first free `stem_k.ext` if `path` exists.
pub fn fresh_file(path: &Path) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut candidate = path.to_path_buf();
    let mut k = 0;
    while candidate.exists() {
        k += 1;
        candidate = with_suffix(path, k);
    }
    Ok(candidate)
}

/// `path` if it is absent or an empty directory, else the first free
/// `path_k`; the directory is created.
pub fn fresh_dir(path: &Path) -> Result<PathBuf, CliError> {
    let usable = |p: &Path| -> bool {
        !p.exists() || (p.is_dir() && std::fs::read_dir(p).map(|mut d| d.next().is_none()).unwrap_or(false))
    };
    let mut candidate = path.to_path_buf();
    let mut k = 0;
    while !usable(&candidate) {
        k += 1;
        candidate = with_suffix(path, k);
    }
    std::fs::create_dir_all(&candidate)?;
    Ok(candidate)
}

pub fn json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, json_string(value)?)?;
    Ok(())
}

pub fn announce(path: &Path) {
    println!("wrote {}", path.display());
}
