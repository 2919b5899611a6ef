//! IDX (MNIST/EMNIST) ingestion. Big-endian headers, unsigned-byte payload,
//! optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{invalid, IdxError, Result};
use crate::scalar::Scalar;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image file and its label file into a dataset with pixels scaled
/// to `[0, 1]` and each image flattened row-major.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Returns `(dims, payload)` after validating magic and length.
fn parse_header(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(IdxError::BadMagic {
            found,
            expected: magic,
        });
    }
    let dims = (0..ndims)
        .map(|k| read_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

pub fn parse_idx<T: Scalar>(images: &[u8], labels: &[u8]) -> Result<Dataset<T>> {
    let (img_dims, pixels) = parse_header(images, IMAGE_MAGIC, 3)?;
    let (lbl_dims, raw_labels) = parse_header(labels, LABEL_MAGIC, 1)?;
    if img_dims[0] != lbl_dims[0] {
        return Err(IdxError::CountMismatch {
            images: img_dims[0],
            labels: lbl_dims[0],
        }
        .into());
    }
    let dim = img_dims[1] * img_dims[2];
    let scale = T::one() / T::of(255.0);
    let features = pixels.iter().map(|&p| T::of(p as f64) * scale).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&y| y as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, dim, num_classes)
}

/// Writes a dataset whose features lie in `[0, 1]` as an uncompressed IDX
/// pair, one `1 x dim` image per example. Pixels are rounded to the nearest
/// of the 256 levels.
pub fn write_idx<T: Scalar>(
    ds: &Dataset<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if ds.num_classes() > 256 {
        return Err(invalid("labels", "IDX labels are single bytes"));
    }
    let mut img = Vec::with_capacity(16 + ds.features().len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), 1, ds.dim()] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &x in ds.features() {
        let x = x.as_f64();
        if !(0.0..=1.0).contains(&x) {
            return Err(invalid("features", format!("{x} outside [0, 1]")));
        }
        img.push((x * 255.0).round() as u8);
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels().iter().map(|&y| y as u8));
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lbl)?;
    Ok(())
}
