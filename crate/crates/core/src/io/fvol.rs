//! Feature volume files.

use std::path::Path;

use super::bytes::{ByteReader, ByteWriter};
use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::feature_field::{renormalize, FeatureVolume};

pub const FVOL_MAGIC: &[u8; 4] = b"FVOL";
pub const FVOL_VERSION: u16 = 1;
/// Byte offset of the first feature value.
pub const FVOL_HEADER_LEN: usize = 22;
/// Vectors further than this from unit norm are rejected rather than repaired.
pub const FVOL_REJECT_NORM: f64 = 0.1;

/// A decoded volume plus the number of vectors that had to be renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedVolume {
    pub volume: FeatureVolume,
    pub renormalized: usize,
}

pub fn encode_fvol(volume: &FeatureVolume) -> Result<Vec<u8>> {
    let (t, h, w, d) = volume.dims();
    let mut out = ByteWriter::default();
    out.buf.reserve(FVOL_HEADER_LEN + 4 * volume.data().len() + 4 + volume.source_tag().len());
    out.bytes(FVOL_MAGIC);
    out.u16(FVOL_VERSION);
    for n in [t, h, w, d] {
        out.u32(n)?;
    }
    for v in volume.data() {
        out.bytes(&v.to_le_bytes());
    }
    if !volume.source_tag().is_empty() {
        out.string(volume.source_tag())?;
    }
    Ok(out.buf)
}

pub fn decode_fvol(bytes: &[u8]) -> Result<LoadedVolume> {
    let mut r = ByteReader::new(bytes);
    r.magic(FVOL_MAGIC)?;
    r.version(FVOL_VERSION)?;
    let t = r.count("frame count")?;
    let h = r.count("height")?;
    let w = r.count("width")?;
    let d = r.count("feature dim")?;
    let n = [t, h, w, d]
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| r.error("volume dims overflow"))?;
    let start = r.offset();
    let raw = r.take(4 * n, "feature data")?;
    let mut data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(start + 4 * i as u64, "non-finite feature value"));
    }
    for (i, v) in data.chunks_exact(d).enumerate() {
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > FVOL_REJECT_NORM {
            return Err(Error::format(
                start + 4 * (i * d) as u64,
                format!("feature vector {i} has norm {norm:.6}, too far from 1"),
            ));
        }
    }
    let source_tag = if r.remaining() == 0 {
        String::new()
    } else {
        r.string("source tag")?
    };
    r.finish("source tag")?;
    let renormalized = renormalize(&mut data, d, FeatureVolume::NORM_TOLERANCE, FVOL_REJECT_NORM)?;
    if renormalized > 0 {
        log::warn!("renormalized {renormalized} feature vectors off unit norm by more than {}", FeatureVolume::NORM_TOLERANCE);
    }
    let volume = FeatureVolume::new(t, h, w, d, data, source_tag)?;
    Ok(LoadedVolume { volume, renormalized })
}

pub fn read_fvol(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    decode_fvol(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_fvol(volume: &FeatureVolume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_fvol(volume)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> FeatureVolume {
        let data = vec![0.6, 0.8, 1.0, 0.0, 0.0, -1.0, -0.8, 0.6];
        FeatureVolume::new(2, 1, 2, 2, data, "unit").unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let v = volume();
        let bytes = encode_fvol(&v).unwrap();
        assert_eq!(bytes.len(), FVOL_HEADER_LEN + 32 + 4 + 4);
        let back = decode_fvol(&bytes).unwrap();
        assert_eq!(back.renormalized, 0);
        assert_eq!(back.volume, v);
        assert_eq!(encode_fvol(&back.volume).unwrap(), bytes);
    }

    #[test]
    fn empty_tag_is_omitted() {
        let mut v = volume();
        v.set_source_tag("");
        let bytes = encode_fvol(&v).unwrap();
        assert_eq!(bytes.len(), FVOL_HEADER_LEN + 32);
        assert_eq!(decode_fvol(&bytes).unwrap().volume.source_tag(), "");
    }

    #[test]
    fn wrong_magic_fails_at_zero() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_fvol(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_version_fails_at_four() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_fvol(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn slightly_off_vector_is_repaired() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        // second vector (1, 0) -> (1.05, 0)
        let at = FVOL_HEADER_LEN + 8;
        bytes[at..at + 4].copy_from_slice(&1.05f32.to_le_bytes());
        let loaded = decode_fvol(&bytes).unwrap();
        assert_eq!(loaded.renormalized, 1);
        assert_eq!(loaded.volume.feature(0, 0, 1), &[1.0, 0.0]);
    }

    #[test]
    fn far_off_vector_is_rejected_with_offset() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        let at = FVOL_HEADER_LEN + 16;
        bytes[at + 4..at + 8].copy_from_slice(&(-1.5f32).to_le_bytes());
        let err = decode_fvol(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == at as u64), "{err}");
    }

    #[test]
    fn nan_is_rejected_with_offset() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        let at = FVOL_HEADER_LEN + 12;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_fvol(&bytes), Err(Error::Format { offset, .. }) if offset == at as u64));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode_fvol(&volume()).unwrap();
        let untagged = FVOL_HEADER_LEN + 32;
        for len in 0..bytes.len() {
            match decode_fvol(&bytes[..len]) {
                Ok(v) if len == untagged => assert_eq!(v.volume.source_tag(), ""),
                Err(Error::Format { offset, .. }) => assert!(offset <= len as u64),
                other => panic!("prefix {len}: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode_fvol(&volume()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_fvol(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut w = ByteWriter::default();
        w.bytes(FVOL_MAGIC);
        w.u16(1);
        for _ in 0..4 {
            w.u32(u32::MAX as usize).unwrap();
        }
        assert!(matches!(decode_fvol(&w.buf), Err(Error::Format { .. })));
    }
}
