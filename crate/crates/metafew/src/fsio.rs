//! Small filesystem helpers shared by dataset, checkpoint, and report
//! writers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Writes bytes via a sibling temp file plus rename, so readers never
/// observe a half-written file. Creates parent directories as needed.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
