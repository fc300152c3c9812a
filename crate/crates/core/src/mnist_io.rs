//! IDX container parsing and MNIST sample preparation.
//!
//! ```text
//! images: [00 00 08 03] [n: u32 BE] [rows: u32 BE] [cols: u32 BE] n*rows*cols bytes
//! labels: [00 00 08 01] [n: u32 BE] n bytes
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASSES: usize = 10;
pub const TRAIN_LEN: usize = 60_000;
pub const TEST_LEN: usize = 10_000;

/// Canonical MNIST file names inside a data directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// One decoded image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteGrid {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f32>,
    pub label: u8,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let word = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        needed: offset + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([word[0], word[1], word[2], word[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::Format { expected, found });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ByteGrid>> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let per_image = rows * cols;
    let needed = 16 + n * per_image;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let payload = &bytes[16..needed];
    if per_image == 0 {
        return Ok(vec![
            ByteGrid {
                rows,
                cols,
                pixels: Vec::new()
            };
            n
        ]);
    }
    Ok(payload
        .chunks_exact(per_image)
        .map(|chunk| ByteGrid {
            rows,
            cols,
            pixels: chunk.to_vec(),
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let labels = &bytes[8..needed];
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::Domain {
            label: bad as u32,
            classes: CLASSES,
        });
    }
    Ok(labels.to_vec())
}

/// Inverse of [`parse_idx_images`] for a homogeneous list of grids.
pub fn encode_idx_images(grids: &[ByteGrid]) -> Vec<u8> {
    let (rows, cols) = grids.first().map_or((0, 0), |g| (g.rows, g.cols));
    let mut out = Vec::with_capacity(16 + grids.len() * rows * cols);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(grids.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for g in grids {
        out.extend_from_slice(&g.pixels);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Flattens a 28x28 grid row-major and divides every pixel by 255.
pub fn normalize(grid: &ByteGrid) -> Result<Vec<f32>> {
    if grid.rows != SIDE || grid.cols != SIDE || grid.pixels.len() != PIXELS {
        return Err(Error::shape(format!(
            "expected a {SIDE}x{SIDE} image, got {}x{}",
            grid.rows, grid.cols
        )));
    }
    Ok(grid.pixels.iter().map(|&p| p as f32 / 255.0).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Zips an image file with a label file into normalized samples.
pub fn load_split(images_path: &Path, labels_path: &Path) -> Result<Vec<ImageSample>> {
    let grids = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if grids.len() != labels.len() {
        return Err(Error::Pairing {
            images: grids.len(),
            labels: labels.len(),
        });
    }
    grids
        .iter()
        .zip(labels)
        .map(|(g, label)| {
            Ok(ImageSample {
                pixels: normalize(g)?,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn load_dataset(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(train_images, train_labels)?,
        test: load_split(test_images, test_labels)?,
    })
}

/// Loads the four canonical MNIST files from `dir` and checks the split sizes.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let ds = load_dataset(&p(TRAIN_IMAGES), &p(TRAIN_LABELS), &p(TEST_IMAGES), &p(TEST_LABELS))?;
    if ds.train.len() != TRAIN_LEN || ds.test.len() != TEST_LEN {
        return Err(Error::shape(format!(
            "expected {TRAIN_LEN}/{TEST_LEN} train/test samples, got {}/{}",
            ds.train.len(),
            ds.test.len()
        )));
    }
    Ok(ds)
}
