//! IDX binary format (the MNIST/FashionMNIST distribution format).
//!
//! Big-endian throughout. Image files: magic 0x00000803, then N, H, W as
//! 32-bit integers, then N*H*W unsigned bytes. Label files: magic
//! 0x00000801, then N, then N bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array4;

use crate::error::{Error, Result};

use super::{Dataset, Split};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label pair into a dataset with pixels scaled by 1/255
/// and a singleton channel dimension.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    name: impl Into<String>,
    split: Split,
) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(images_path)?);
    let magic = r.read_u32::<BigEndian>()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            images_path.display().to_string(),
            format!("expected image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = r.read_u32::<BigEndian>()? as usize;
    let h = r.read_u32::<BigEndian>()? as usize;
    let w = r.read_u32::<BigEndian>()? as usize;
    let mut bytes = vec![0u8; n * h * w];
    r.read_exact(&mut bytes).map_err(|e| {
        Error::format(images_path.display().to_string(), format!("truncated pixel data: {e}"))
    })?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let lmagic = lr.read_u32::<BigEndian>()?;
    if lmagic != LABEL_MAGIC {
        return Err(Error::format(
            labels_path.display().to_string(),
            format!("expected label magic {LABEL_MAGIC:#010x}, found {lmagic:#010x}"),
        ));
    }
    let ln = lr.read_u32::<BigEndian>()? as usize;
    if ln != n {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            n,
            labels_path.display(),
            ln
        )));
    }
    let mut label_bytes = vec![0u8; ln];
    lr.read_exact(&mut label_bytes).map_err(|e| {
        Error::format(labels_path.display().to_string(), format!("truncated labels: {e}"))
    })?;

    let pixels: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Array4::from_shape_vec((n, 1, h, w), pixels)
        .map_err(|e| Error::Consistency(e.to_string()))?;
    let labels: Vec<i32> = label_bytes.iter().map(|&b| i32::from(b)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(inputs, labels, num_classes.max(2), name, split)
}

/// Write a dataset back out as an IDX image/label pair (values rounded to
/// bytes). Mostly useful for fixtures and for exporting generated data.
pub fn write_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = d.input_shape();
    if c != 1 {
        return Err(Error::Argument(format!("IDX export requires 1 channel, got {c}")));
    }
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    iw.write_u32::<BigEndian>(d.len() as u32)?;
    iw.write_u32::<BigEndian>(h as u32)?;
    iw.write_u32::<BigEndian>(w as u32)?;
    for &v in d.inputs.iter() {
        iw.write_u8((v * 255.0).round().clamp(0.0, 255.0) as u8)?;
    }
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_u32::<BigEndian>(LABEL_MAGIC)?;
    lw.write_u32::<BigEndian>(d.len() as u32)?;
    for &y in &d.labels {
        lw.write_u8(y as u8)?;
    }
    lw.flush()?;
    Ok(())
}
