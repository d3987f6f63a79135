//! SPXR raster container.
//!
//! Layout (little-endian): magic `SPXR`, u16 version, u32 H, W, d, d f32
//! wavelengths, H·W·d f32 values (band-interleaved-by-pixel), u8 label flag,
//! optional H·W u16 labels, u32 CRC-32 of every preceding byte.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, FormatError, Result};
use crate::image::{SegmentationMap, SpectralImage};

pub const MAGIC: &[u8; 4] = b"SPXR";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 12;

/// Decoded raster. Labels carry no class count; wrap them with
/// [`RasterFile::segmentation`] once it is known.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFile {
    pub image: SpectralImage,
    pub labels: Option<Vec<u16>>,
}

impl RasterFile {
    pub fn segmentation(&self, classes: usize) -> Result<Option<SegmentationMap>> {
        self.labels
            .as_ref()
            .map(|l| SegmentationMap::new(self.image.height(), self.image.width(), classes, l.clone()))
            .transpose()
    }
}

/// Exact encoded size of an `h×w×d` raster.
pub fn encoded_len(h: usize, w: usize, d: usize, labels: bool) -> Option<usize> {
    let px = h.checked_mul(w)?;
    let values = px.checked_mul(d)?.checked_mul(4)?;
    let lab = if labels { px.checked_mul(2)? } else { 0 };
    HEADER.checked_add(d.checked_mul(4)?)?.checked_add(values)?.checked_add(1 + lab + 4)
}

pub fn encode(image: &SpectralImage, labels: Option<&SegmentationMap>) -> Result<Vec<u8>> {
    let (h, w, d) = (image.height(), image.width(), image.bands());
    if let Some(l) = labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::Shape(format!("labels {}×{} for image {h}×{w}", l.height(), l.width())));
        }
    }
    let dims = [h, w, d].map(|v| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} too large"))));
    let mut out = Vec::with_capacity(encoded_len(h, w, d, labels.is_some()).unwrap_or(0));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in dims {
        out.extend_from_slice(&v?.to_le_bytes());
    }
    for &l in image.wavelengths() {
        out.extend_from_slice(&(l as f32).to_le_bytes());
    }
    for &v in image.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match labels {
        Some(l) => {
            out.push(1);
            for &c in l.labels() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> usize {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes")) as usize
}

fn f32s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
}

/// Decodes a container. Bad magic, unsupported version, truncation and CRC
/// failures are reported as distinct errors, in that order of precedence.
pub fn decode(bytes: &[u8]) -> Result<RasterFile> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < 6 {
        return Err(FormatError::Truncated.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated.into());
    }
    let (h, w, d) = (u32_at(bytes, 6), u32_at(bytes, 10), u32_at(bytes, 14));
    let flag_at = encoded_len(h, w, d, false).map(|n| n - 5).ok_or_else(|| FormatError::Invalid(format!("dimensions {h}×{w}×{d} overflow")))?;
    if bytes.len() <= flag_at {
        return Err(FormatError::Truncated.into());
    }
    let has_labels = match bytes[flag_at] {
        0 => false,
        1 => true,
        f => {
            // Still prefer a CRC verdict when the flag itself was corrupted.
            let body = &bytes[..bytes.len().saturating_sub(4)];
            if bytes.len() >= 4 {
                let stored = u32_at(bytes, bytes.len() - 4) as u32;
                let computed = crc32fast::hash(body);
                if stored != computed {
                    return Err(FormatError::ChecksumMismatch { stored, computed }.into());
                }
            }
            return Err(FormatError::Invalid(format!("label flag {f}")).into());
        }
    };
    let expected = encoded_len(h, w, d, has_labels).ok_or_else(|| FormatError::Invalid("dimensions overflow".into()))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated.into());
    }
    if bytes.len() > expected {
        return Err(FormatError::Invalid(format!("{} trailing bytes", bytes.len() - expected)).into());
    }
    let (body, tail) = bytes.split_at(expected - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed }.into());
    }
    let wl_end = HEADER + 4 * d;
    let wavelengths = f32s(&bytes[HEADER..wl_end]);
    let values = f32s(&bytes[wl_end..flag_at]);
    let image = SpectralImage::new(h, w, wavelengths, values).map_err(|e| FormatError::Invalid(format!("{e}")))?;
    let labels = has_labels.then(|| bytes[flag_at + 1..expected - 4].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect());
    Ok(RasterFile { image, labels })
}
