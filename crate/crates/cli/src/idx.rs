//! IDX container I/O, bit-exact per the MNIST convention: big-endian magic
//! and dimension words, then raw unsigned bytes.
//!
//! Images use magic 0x00000803 with dims (count, rows, cols); labels use
//! 0x00000801 with a single count. Pixels stay `u8` in memory — scaling to
//! [0, 1] happens only at tensor conversion, so write(read(x)) is the
//! identity on files.

use std::path::Path;

use twta_core::numerics::Tensor;

use crate::error::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let stride = self.rows * self.cols;
        &self.pixels[i * stride..(i + 1) * stride]
    }

    /// Flat `[count, rows*cols]` tensor with pixel 255 mapping to exactly
    /// 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f32> = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::from_vec(vec![self.count(), self.rows * self.cols], data)
            .expect("pixel buffer length is count*rows*cols by construction")
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CliError::User(format!(
            "truncated IDX file: {what} needs bytes {offset}..{end}, file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an image file's bytes. Errors carry byte offsets.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(CliError::User(format!(
            "bad IDX image magic at byte 0: got {magic:#010x}, want {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let want = 16 + count * rows * cols;
    if bytes.len() != want {
        return Err(CliError::User(format!(
            "truncated IDX image file: header promises {count} images of {rows}x{cols} \
             ({want} bytes total), file has {}",
            bytes.len()
        )));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// Parse a label file's bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(CliError::User(format!(
            "bad IDX label magic at byte 0: got {magic:#010x}, want {LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "label count")? as usize;
    let want = 8 + count;
    if bytes.len() != want {
        return Err(CliError::User(format!(
            "truncated IDX label file: header promises {count} labels ({want} bytes total), \
             file has {}",
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label file pair and check they agree on the item count.
pub fn ingest_idx(images_path: &Path, labels_path: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let images = parse_idx_images(&crate::error::read_file(images_path)?)?;
    let labels = parse_idx_labels(&crate::error::read_file(labels_path)?)?;
    if images.count() != labels.len() {
        return Err(CliError::User(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            images.count(),
            labels_path.display(),
            labels.len()
        )));
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_images() -> IdxImages {
        IdxImages {
            rows: 2,
            cols: 3,
            pixels: vec![0, 10, 255, 4, 5, 6, 250, 8, 9, 1, 2, 3],
        }
    }

    #[test]
    fn encode_parse_round_trip_is_identity() {
        let imgs = tiny_images();
        let parsed = parse_idx_images(&encode_idx_images(&imgs)).unwrap();
        assert_eq!(parsed, imgs);
        assert_eq!(parsed.count(), 2);

        let labels = vec![3u8, 7];
        assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn pixel_255_scales_to_exactly_one() {
        let t = tiny_images().to_tensor();
        assert_eq!(t.shape(), [2, 6]);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(t.data()[0], 0.0);
        assert!((t.data()[1] - 10.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_magic_names_offset_and_values() {
        let mut bytes = encode_idx_images(&tiny_images());
        bytes[3] = 0x01; // now reads as the label magic
        let err = parse_idx_images(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 0"), "{msg}");
        assert!(msg.contains("0x00000801"), "{msg}");
        assert!(msg.contains("0x00000803"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn truncation_reports_expected_vs_actual() {
        let mut bytes = encode_idx_images(&tiny_images());
        bytes.truncate(bytes.len() - 5);
        let msg = parse_idx_images(&bytes).unwrap_err().to_string();
        assert!(msg.contains("28 bytes total"), "{msg}");
        assert!(msg.contains("file has 23"), "{msg}");

        let short = encode_idx_labels(&[1, 2, 3])[..9].to_vec();
        let msg = parse_idx_labels(&short).unwrap_err().to_string();
        assert!(msg.contains("11 bytes total"), "{msg}");
    }

    #[test]
    fn header_shorter_than_magic_is_caught() {
        let msg = parse_idx_images(&[0, 8]).unwrap_err().to_string();
        assert!(msg.contains("bytes 0..4"), "{msg}");
    }

    #[test]
    fn mismatched_pair_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, encode_idx_images(&tiny_images())).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[1, 2, 3])).unwrap();
        let msg = ingest_idx(&ip, &lp).unwrap_err().to_string();
        assert!(msg.contains("2 images"), "{msg}");
        assert!(msg.contains("3 labels"), "{msg}");
    }

    #[test]
    fn missing_file_is_an_environment_error() {
        let err = ingest_idx(Path::new("/nonexistent/a"), Path::new("/nonexistent/b")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
