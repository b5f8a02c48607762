use std::fs;
use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CIFAR_CLASSES: usize = 10;

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => format_err(bytes.len(), format!("truncated {what}")),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Decodes an IDX image file (`[N, rows, cols]` bytes) and its label file.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES {
        return format_err(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"));
    }
    let n = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return format_err(4, "zero image dimension");
    }
    let body = &images[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return format_err(images.len(), format!("image data truncated: {} of {need} bytes", body.len()));
    }

    let magic = be_u32(labels, 0, "label header")?;
    if magic != IDX_LABELS {
        return format_err(0, format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"));
    }
    let count = be_u32(labels, 4, "label header")? as usize;
    if count != n {
        return format_err(4, format!("{count} labels for {n} images"));
    }
    if labels.len() < 8 + n {
        return format_err(labels.len(), format!("label data truncated: {} of {n} bytes", labels.len() - 8));
    }
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(2, |&m| (m + 1).max(2));
    let data = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    LabeledDataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, ys, classes)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    parse_idx(&read(images)?, &read(labels)?)
}

/// Decodes concatenated CIFAR-10 binary batches: one label byte then
/// 3x32x32 channel-major pixels per record.
pub fn parse_cifar_binary(files: &[Vec<u8>]) -> Result<LabeledDataset> {
    let total: usize = files.iter().map(|f| f.len() / CIFAR_RECORD).sum();
    if total == 0 {
        return format_err(0, "no complete CIFAR records");
    }
    let mut data = Vec::with_capacity(total * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(total);
    for bytes in files {
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
            return format_err(offset, format!("partial record of {} bytes", bytes.len() - offset));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let y = record[0] as usize;
            if y >= CIFAR_CLASSES {
                return format_err(r * CIFAR_RECORD, format!("label byte {y} is not a CIFAR-10 class"));
            }
            labels.push(y);
            data.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    LabeledDataset::new(Tensor::new(vec![total, 3, 32, 32], data)?, labels, CIFAR_CLASSES)
}

pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<LabeledDataset> {
    let files = paths.iter().map(|p| read(p)).collect::<Result<Vec<_>>>()?;
    parse_cifar_binary(&files)
}
