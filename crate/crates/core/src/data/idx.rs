//! Big-endian IDX files as distributed with MNIST.
//!
//! Images: magic `0x00000803`, count, rows, cols, then `count * rows * cols`
//! unsigned bytes. Labels: magic `0x00000801`, count, then `count` bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Decoded image file: pixel bytes scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::Magic { expected, found });
    }
    Ok(())
}

pub fn read_images(bytes: &[u8]) -> std::result::Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..needed].iter().map(|&p| p as f64 / 255.0).collect();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_labels(bytes: &[u8]) -> std::result::Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Loads an image/label file pair. The class count is at least 10.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_images(&fs::read(images_path)?)?;
    let labels = read_labels(&fs::read(labels_path)?)?;
    from_parts(images, &labels)
}

pub(crate) fn from_parts(images: IdxImages, labels: &[u8]) -> Result<LabeledDataset> {
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        }
        .into());
    }
    let classes = labels.iter().map(|&y| y as usize + 1).max().unwrap_or(0).max(10);
    let dim = images.rows * images.cols;
    LabeledDataset::new(
        images.pixels,
        labels.iter().map(|&y| y as usize).collect(),
        dim,
        classes,
    )
}

pub fn write_images<W: Write>(out: &mut W, rows: usize, cols: usize, pixels: &[u8]) -> std::io::Result<()> {
    let per = rows * cols;
    assert!(per > 0 && pixels.len() % per == 0, "pixel buffer is not a whole number of images");
    out.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    out.write_all(&((pixels.len() / per) as u32).to_be_bytes())?;
    out.write_all(&(rows as u32).to_be_bytes())?;
    out.write_all(&(cols as u32).to_be_bytes())?;
    out.write_all(pixels)
}

pub fn write_labels<W: Write>(out: &mut W, labels: &[u8]) -> std::io::Result<()> {
    out.write_all(&LABEL_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)
}
