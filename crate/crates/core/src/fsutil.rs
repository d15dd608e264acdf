//! Write-then-rename helpers so failed runs leave no partial outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Sibling staging path for `target` (same directory, so rename is atomic).
pub fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    target.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Moves the fully written `staging` directory to `target`, replacing any
/// previous content.
pub fn replace_dir(staging: &Path, target: &Path) -> io::Result<()> {
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    if target.exists() {
        let trash = target.with_file_name(format!(
            ".{}.old-{}",
            target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            std::process::id()
        ));
        fs::rename(target, &trash)?;
        fs::rename(staging, target)?;
        fs::remove_dir_all(&trash)?;
    } else {
        fs::rename(staging, target)?;
    }
    Ok(())
}

/// Writes `contents` to `path` via a temporary sibling file and rename.
pub fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = staging_path(path);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}
