//! Toy datasets and the IDX image reader.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sparq_core::trainer::{Dataset, Split, TrainError};
use sparq_core::{Matrix, Rng};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: byte offset {offset}: {reason}")]
    Idx {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("invalid dataset parameter: {0}")]
    Params(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    Blobs,
    TwoMoons,
    IdxImages,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::IdxImages => "idx-images",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "idx-images" => Ok(DatasetKind::IdxImages),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub classes: usize,
    /// Samples per class (blobs) or in total (two-moons).
    pub samples: usize,
    pub dim: usize,
    /// Blob centers are `separation · N(0, I)`.
    pub separation: f64,
    /// Standard deviation of the per-sample noise.
    pub noise: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 1000,
            dim: 64,
            separation: 1.0,
            noise: 2.5,
            images: None,
            labels: None,
        }
    }
}

/// Builds the dataset and splits it 80/20 by a seeded shuffle.
pub fn make_dataset(kind: DatasetKind, rng: &Rng, params: &DatasetParams) -> Result<Split, DatasetError> {
    let full = match kind {
        DatasetKind::Blobs => blobs(&mut rng.fork(1), params)?,
        DatasetKind::TwoMoons => two_moons(&mut rng.fork(1), params)?,
        DatasetKind::IdxImages => {
            let (Some(images), Some(labels)) = (&params.images, &params.labels) else {
                return Err(DatasetError::Params(
                    "idx-images needs both dataset.images and dataset.labels".into(),
                ));
            };
            read_idx_pair(images, labels)?
        }
    };
    split(&full, &mut rng.fork(2))
}

pub fn blobs(rng: &mut Rng, p: &DatasetParams) -> Result<Dataset, DatasetError> {
    if p.classes < 2 || p.samples == 0 || p.dim == 0 {
        return Err(DatasetError::Params(
            "blobs needs classes >= 2, samples >= 1, dim >= 1".into(),
        ));
    }
    let centers: Vec<Vec<f64>> = (0..p.classes)
        .map(|_| (0..p.dim).map(|_| p.separation * rng.gaussian()).collect())
        .collect();
    let mut rows = Vec::with_capacity(p.classes * p.samples);
    let mut labels = Vec::with_capacity(p.classes * p.samples);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..p.samples {
            rows.push(center.iter().map(|&m| m + p.noise * rng.gaussian()).collect());
            labels.push(c);
        }
    }
    Ok(Dataset::new(
        Matrix::from_rows(&rows).map_err(TrainError::from)?,
        labels,
        p.classes,
    )?)
}

/// Two interleaved half circles in the first two features; any further
/// features are pure noise.
pub fn two_moons(rng: &mut Rng, p: &DatasetParams) -> Result<Dataset, DatasetError> {
    if p.samples < 2 || p.dim < 2 {
        return Err(DatasetError::Params("two-moons needs samples >= 2, dim >= 2".into()));
    }
    let mut rows = Vec::with_capacity(p.samples);
    let mut labels = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let class = i % 2;
        let t = std::f64::consts::PI * rng.uniform();
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let mut row = vec![x + p.noise * rng.gaussian(), y + p.noise * rng.gaussian()];
        row.extend((2..p.dim).map(|_| p.noise * rng.gaussian()));
        rows.push(row);
        labels.push(class);
    }
    Ok(Dataset::new(
        Matrix::from_rows(&rows).map_err(TrainError::from)?,
        labels,
        2,
    )?)
}

/// Seeded 80/20 train/test split.
pub fn split(data: &Dataset, rng: &mut Rng) -> Result<Split, DatasetError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let cut = data.len() * 4 / 5;
    let take = |ids: &[usize]| -> Result<Dataset, DatasetError> {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| data.x.row(i).to_vec()).collect();
        let x = if rows.is_empty() {
            Matrix::zeros(0, data.dim())
        } else {
            Matrix::from_rows(&rows).map_err(TrainError::from)?
        };
        Ok(Dataset::new(x, ids.iter().map(|&i| data.y[i]).collect(), data.classes)?)
    };
    Ok(Split {
        train: take(&order[..cut])?,
        test: take(&order[cut..])?,
    })
}

struct IdxCursor<'a> {
    path: &'a str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> IdxCursor<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> DatasetError {
        DatasetError::Idx {
            path: self.path.to_string(),
            offset,
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        let end = self.offset + 4;
        let b = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| self.fail(self.bytes.len(), "unexpected end of header"))?;
        self.offset = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8], DatasetError> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(self.fail(
                self.bytes.len(),
                format!("payload truncated: expected {len} bytes, found {available}"),
            ));
        }
        if available > len {
            return Err(self.fail(self.offset + len, "trailing bytes after payload"));
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }
}

/// Parses an IDX image file (`0x00000803`, `u8` pixels). Returns
/// `(count, rows·cols, pixels)`.
pub fn parse_idx_images(path: &str, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let mut cur = IdxCursor { path, bytes, offset: 0 };
    let magic = cur.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(cur.fail(0, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let dim = rows
        .checked_mul(cols)
        .filter(|&d| d > 0)
        .ok_or_else(|| cur.fail(8, "image dimensions must be nonzero"))?;
    let len = n.checked_mul(dim).ok_or_else(|| cur.fail(4, "image count overflows"))?;
    Ok((n, dim, cur.payload(len)?.to_vec()))
}

/// Parses an IDX label file (`0x00000801`, `u8` labels).
pub fn parse_idx_labels(path: &str, bytes: &[u8]) -> Result<Vec<u8>, DatasetError> {
    let mut cur = IdxCursor { path, bytes, offset: 0 };
    let magic = cur.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(cur.fail(0, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = cur.u32()? as usize;
    Ok(cur.payload(n)?.to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads an image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn read_idx_pair(images: &Path, labels: &Path) -> Result<Dataset, DatasetError> {
    let ip = images.display().to_string();
    let lp = labels.display().to_string();
    let (n, dim, pixels) = parse_idx_images(&ip, &read_file(images)?)?;
    let ys = parse_idx_labels(&lp, &read_file(labels)?)?;
    if ys.len() != n {
        return Err(DatasetError::Idx {
            path: lp,
            offset: 4,
            reason: format!("{} labels for {n} images", ys.len()),
        });
    }
    let classes = ys.iter().map(|&c| c as usize + 1).max().unwrap_or(0).max(2);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let x = Matrix::new(n, dim, data).map_err(TrainError::from)?;
    Ok(Dataset::new(x, ys.into_iter().map(usize::from).collect(), classes)?)
}

/// Serializes an IDX image file; used to build fixtures.
pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
