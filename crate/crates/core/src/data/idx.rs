//! Big-endian IDX containers (`0x00000803` images, `0x00000801` labels),
//! optionally gzip-compressed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed content of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxPart {
    /// `[n, rows * cols]`, pixels scaled by 1/255.
    Images { pixels: Tensor, rows: usize, cols: usize },
    Labels(Vec<usize>),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn parse(bytes: &[u8], path: &Path) -> Result<IdxPart> {
    match be_u32(bytes, 0, path)? {
        IMAGES_MAGIC => {
            let n = be_u32(bytes, 4, path)? as usize;
            let rows = be_u32(bytes, 8, path)? as usize;
            let cols = be_u32(bytes, 12, path)? as usize;
            let body = &bytes[16..];
            let need = n * rows * cols;
            if body.len() < need {
                return Err(Error::format(
                    path,
                    format!("truncated: {need} pixel bytes declared, {} present", body.len()),
                ));
            }
            let data = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxPart::Images {
                pixels: Tensor::new(vec![n, rows * cols], data)?,
                rows,
                cols,
            })
        }
        LABELS_MAGIC => {
            let n = be_u32(bytes, 4, path)? as usize;
            let body = &bytes[8..];
            if body.len() < n {
                return Err(Error::format(
                    path,
                    format!("truncated: {n} labels declared, {} present", body.len()),
                ));
            }
            Ok(IdxPart::Labels(body[..n].iter().map(|&b| usize::from(b)).collect()))
        }
        other => Err(Error::format(path, format!("unknown magic 0x{other:08x}"))),
    }
}

/// Parses an IDX image or label file.
pub fn load_idx(path: &Path) -> Result<IdxPart> {
    parse(&read_bytes(path)?, path)
}

pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    match load_idx(path)? {
        IdxPart::Images { pixels, .. } => Ok(pixels),
        IdxPart::Labels(_) => Err(Error::format(path, "expected an image file, found labels")),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    match load_idx(path)? {
        IdxPart::Labels(l) => Ok(l),
        IdxPart::Images { .. } => Err(Error::format(path, "expected a label file, found images")),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        crate::io::write_atomic(path, &enc.finish()?)
    } else {
        crate::io::write_atomic(path, bytes)
    }
}

/// Writes `[n, rows*cols]` pixels in [0, 1] as an IDX image file (gzip when
/// the path ends in `.gz`). Values are rounded to the nearest byte.
pub fn write_idx_images(path: &Path, pixels: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if pixels.row_len() != rows * cols {
        return Err(Error::shape(
            "write_idx_images",
            format!("rows of {} values for {rows}x{cols} images", pixels.row_len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, pixels.rows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_bytes(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    write_bytes(path, &out)
}
