//! Batch pipeline orchestration: configuration files, run manifests,
//! atomic artifact writes, and the command implementations behind the
//! CLI. (Extended as the pipeline stages land.)

use crate::error::{RecamError, Result};
use std::path::Path;

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename). Parent directories are created as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| RecamError::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| RecamError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| RecamError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| RecamError::io(path, e))?;
    Ok(())
}
