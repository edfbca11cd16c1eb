//! File formats. Binary formats are little-endian throughout (PGM samples
//! excepted, which follow the PGM convention). Every writer goes through a
//! temporary file in the target directory and an atomic rename, so readers
//! never observe a partial file.

mod bytes;
pub mod checkpoint;
pub mod docs;
pub mod fvol;
pub mod pgm;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    decode_displacement, decode_feature_field, decode_net, encode_displacement, encode_feature_field, encode_net,
    read_displacement, read_feature_field, read_net, write_displacement, write_feature_field, write_net,
};
pub use docs::{
    decode_annotation, decode_propagation, encode_annotation, encode_propagation, from_json, read_annotation,
    read_propagation, to_json, write_annotation, write_propagation, AnnotatedPoint, AnnotationDoc, FrameRef,
    MaskOutputs, PropagationDoc, PropagationMode, SourceRef, ENGINE_VERSION,
};
pub use fvol::{decode_fvol, encode_fvol, read_fvol, write_fvol, LoadedVolume};
pub use pgm::{
    decode_mask_pgm, decode_probability_pgm, encode_mask_pgm, encode_probability_pgm, read_mask, read_probability,
    write_mask, write_probability,
};

use crate::error::{Error, Result};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_file_error_names_path() {
        let err = read_fvol("/nonexistent/dir/v.fvol").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/dir/v.fvol"));
    }
}
