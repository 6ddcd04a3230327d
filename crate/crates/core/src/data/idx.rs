//! IDX image/label files (the MNIST container format).
//!
//! Images: big-endian `u32` magic `0x00000803`, then `n`, `rows`, `cols` as
//! big-endian `u32`, then `n·rows·cols` unsigned bytes. Labels: magic
//! `0x00000801`, `n`, then `n` unsigned bytes. Pixels map to `[0, 1]` by
//! dividing by 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ImageBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_u32s(bytes: &[u8], count: usize, path: &Path) -> Result<Vec<u32>> {
    if bytes.len() < 4 * count {
        return Err(format_err(path, "truncated header"));
    }
    Ok(bytes[..4 * count]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

/// Parses an image file into `(rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = read_u32s(bytes, 1, path)?[0];
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let head = read_u32s(bytes, 4, path)?;
    let (n, rows, cols) = (head[1] as usize, head[2] as usize, head[3] as usize);
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() < want {
        return Err(format_err(
            path,
            format!("truncated: expected {want} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((rows, cols, body[..want].to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32s(bytes, 1, path)?[0];
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let n = read_u32s(bytes, 2, path)?[1] as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(format_err(
            path,
            format!("truncated: expected {n} labels, found {}", body.len()),
        ));
    }
    Ok(body[..n].to_vec())
}

pub fn load_idx<T: Scalar>(images_path: &Path, labels_path: &Path) -> Result<ImageBatch<T>> {
    let (rows, cols, pixels) = parse_images(&fs::read(images_path)?, images_path)?;
    let labels = parse_labels(&fs::read(labels_path)?, labels_path)?;
    let n = pixels.len() / (rows * cols).max(1);
    if n != labels.len() {
        return Err(format_err(
            labels_path,
            format!("image count {n} does not match label count {}", labels.len()),
        ));
    }
    let full = T::of(255.0);
    let data = pixels.iter().map(|&p| T::of_usize(p as usize) / full).collect();
    let images = Tensor::new(vec![n, rows, cols, 1], data)?;
    ImageBatch::new(images, labels.into_iter().map(usize::from).collect())
}

/// Serializes a single-channel batch, quantizing pixels to `round(255·v)`.
pub fn encode_idx<T: Scalar>(batch: &ImageBatch<T>) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w, c) = batch.dims();
    if c != 1 {
        return Err(crate::error::invalid("idx", format!("IDX images need one channel, got {c}")));
    }
    if let Some(&l) = batch.labels().iter().find(|&&l| l > u8::MAX as usize) {
        return Err(crate::error::invalid("idx", format!("label {l} does not fit in a byte")));
    }
    let n = batch.len() as u32;
    let mut images = Vec::with_capacity(16 + batch.images().numel());
    for v in [IMAGES_MAGIC, n, h as u32, w as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        batch
            .images()
            .data()
            .iter()
            .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + batch.len());
    for v in [LABELS_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(batch.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx<T: Scalar>(batch: &ImageBatch<T>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(batch)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [LABELS_MAGIC, labels.len() as u32] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn single_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &image_file(1, 2, 2, &[0, 255, 51, 102]));
        let lab = write(dir.path(), "l", &label_file(&[7]));
        let b: ImageBatch<f64> = load_idx(&img, &lab).unwrap();
        assert_eq!(b.dims(), (2, 2, 1));
        assert_eq!(b.labels(), &[7]);
        assert_eq!(b.images().data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn count_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let img = write(dir.path(), "i", &image_file(2, 1, 1, &[0, 0]));
        let lab = write(dir.path(), "l", &label_file(&[1, 2, 3]));
        let err = load_idx::<f64>(&img, &lab).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let lab = write(dir.path(), "l", &label_file(&[1]));
        let mut bytes = image_file(1, 2, 2, &[1, 2, 3, 4]);
        bytes[3] = 0x04;
        let img = write(dir.path(), "bad", &bytes);
        assert!(load_idx::<f64>(&img, &lab).unwrap_err().to_string().contains("magic"));
        let img = write(dir.path(), "short", &image_file(1, 2, 2, &[1, 2]));
        assert!(load_idx::<f64>(&img, &lab).unwrap_err().to_string().contains("truncated"));
        let img = write(dir.path(), "tiny", &[0, 0]);
        assert!(load_idx::<f64>(&img, &lab).is_err());
    }
}
