//! IDX reader for the MNIST image and label files.
//!
//! Images: big-endian `0x00000803`, count, rows, cols, then one unsigned
//! byte per pixel. Labels: `0x00000801`, count, then one byte per label.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::nn::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FormatError::Truncated(format!("{what}: header ends at byte {}", bytes.len())).into())
}

/// Parses an IDX image file into `(count, rows, cols, pixels in [0,1])`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(FormatError::BadMagic {
            expected: format!("{IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        }
        .into());
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(FormatError::Truncated(format!(
            "images: expected {need} bytes, found {}",
            bytes.len()
        ))
        .into());
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(FormatError::BadMagic {
            expected: format!("{LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        }
        .into());
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    if bytes.len() < 8 + count {
        return Err(FormatError::Truncated(format!(
            "labels: expected {} bytes, found {}",
            8 + count,
            bytes.len()
        ))
        .into());
    }
    let labels: Vec<usize> = bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(FormatError::Header(format!("label {bad} outside 0-9")).into());
    }
    Ok(labels)
}

/// Loads an image/label file pair as a `1×rows×cols` dataset.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(&fs::read(images_path)?)?;
    let labels = parse_labels(&fs::read(labels_path)?)?;
    if labels.len() != count {
        return Err(FormatError::CountMismatch(format!(
            "{count} images but {} labels",
            labels.len()
        ))
        .into());
    }
    Dataset::new([1, rows, cols], pixels, labels)
}

/// Encodes images (bytes, row-major) in IDX format. Used to write fixtures.
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
