//! File formats: PGM images, raw float planes, and tensor containers.
//!
//! Every writer goes through a temp-file-plus-rename so a failed run never
//! leaves a truncated artifact at the destination path.

pub mod container;
pub mod floatplane;
pub mod pgm;

pub use container::{read_container, write_container, TensorContainer};
pub use floatplane::{read_float_plane, write_float_plane};
pub use pgm::{read_mask_pgm, read_pgm, write_mask_pgm, write_pgm16, write_pgm8};

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to `path` atomically: the content lands in a sibling temp
/// file first and is renamed over the destination only once fully flushed.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(&tmp)(e)
    })?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path)(e)
    })
}

fn tmp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Appends a suffix to a path without touching its extension, for sidecar
/// files that live next to their main artifact ("ref.fpl" → "ref.fpl.meta").
pub fn path_with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    std::path::PathBuf::from(os)
}
