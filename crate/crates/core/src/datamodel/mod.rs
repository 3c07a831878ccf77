//! Containers that flow between pipeline stages and their on-disk forms.

mod container;
mod feature_dump;
mod manifest;
mod synthetic;

use std::io::Write;
use std::path::Path;

pub use container::{Container, Dtype, TensorEntry};
pub use feature_dump::{
    decode_feature_dump, encode_feature_dump, read_feature_dump, write_feature_dump,
    write_feature_dump_as, FeatureSet, HEADER_LEN, MAGIC,
};
pub use manifest::{RunManifest, Stage, MANIFEST_SCHEMA_VERSION};
pub use synthetic::{
    band_frequencies, generate_synthetic, FrequencyBand, Image, ImageDataset, DEFAULT_PATCH_SIZE,
};

use crate::error::{MoodError, Result};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so readers never observe a truncated file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MoodError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| MoodError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| MoodError::io(path, e))?;
    tmp.persist(path).map_err(|e| MoodError::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| MoodError::io(path, e))
}
