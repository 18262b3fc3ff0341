//! Persistence: grid files, network weight archives, image files, and the
//! pipeline configuration format. All writes go through a temp-file +
//! rename so partially written outputs never appear under the final name.

pub mod config;
pub mod gridfile;
pub mod imagefile;
pub mod weights;

pub use config::{load_config, parse_config, PipelineConfig};
pub use gridfile::{load_grid, store_grid};
pub use imagefile::{load_pgim, load_png, save_pgim, save_png};
pub use weights::{NamedTensor, TensorArchive};

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;

/// Writes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut tmp = path.to_path_buf();
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}
