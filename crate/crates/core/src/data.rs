//! Datasets from IDX image/label files or `label,f1,...,fD` CSV.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Samples (`N×…`) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    normalization: Normalization,
}

fn data_err(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(data_err(format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::TargetOutOfRange { target: bad, classes: num_classes });
        }
        Ok(Self { inputs, labels, num_classes, normalization: Normalization::default() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gathers the given samples into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let stride = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gathered batch matches shape"), labels)
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(data_err(format!("cannot take {n} of {} samples", self.len())));
        }
        let (inputs, labels) = self.batch(&(0..n).collect::<Vec<_>>());
        Ok(Self { inputs, labels, num_classes: self.num_classes, normalization: self.normalization })
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| data_err("truncated IDX header"))
}

/// Parses an IDX3 image file into `N×1×H×W`, scaled to `[0, 1]` then normalized.
pub fn parse_idx_images(bytes: &[u8], norm: Normalization) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(data_err(format!("bad IDX image magic {magic:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let pixels = &bytes[16..];
    if n == 0 || h == 0 || w == 0 || pixels.len() != n * h * w {
        return Err(data_err(format!("IDX image extents {n}×{h}×{w} do not match {} payload bytes", pixels.len())));
    }
    if !(norm.std > 0.0) {
        return Err(Error::InvalidParameter(format!("normalization std must be > 0, got {}", norm.std)));
    }
    let data = pixels.iter().map(|&p| (p as f64 / 255.0 - norm.mean) / norm.std).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(data_err(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(data_err(format!("IDX label count {n} does not match {} payload bytes", payload.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label IDX pair. The class count is `max(label) + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, norm: Normalization) -> Result<Dataset> {
    let inputs = parse_idx_images(&fs::read(images)?, norm)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if inputs.shape()[0] != labels.len() {
        return Err(data_err(format!("{} images but {} labels", inputs.shape()[0], labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut ds = Dataset::new(inputs, labels, classes)?;
    ds.normalization = norm;
    Ok(ds)
}

/// Parses `label,f1,...,fD` rows. A first line whose label is not an integer is
/// treated as a header. Blank lines are skipped.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let head = fields.next().unwrap_or_default();
        let label = match head.parse::<usize>() {
            Ok(l) => l,
            Err(_) if labels.is_empty() && width.is_none() => {
                width = Some(None);
                continue;
            }
            Err(_) => return Err(data_err(format!("line {line_no}: bad label `{head}`"))),
        };
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|_| data_err(format!("line {line_no}: bad feature `{f}`"))))
            .collect::<Result<_>>()?;
        if row.is_empty() {
            return Err(data_err(format!("line {line_no}: no features")));
        }
        match width {
            Some(Some(d)) if d != row.len() => {
                return Err(data_err(format!("line {line_no}: ragged row with {} features, expected {d}", row.len())))
            }
            _ => width = Some(Some(row.len())),
        }
        labels.push(label);
        features.extend(row);
    }
    let d = width.flatten().ok_or(Error::Empty("dataset"))?;
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, d], features)?, labels, classes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

/// Serializes images to IDX3 bytes (for fixtures and tools). Values are `u8` pixels.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 4 * 784];
        pixels[0] = 255;
        pixels[784 + 10] = 51;
        std::fs::write(dir.path().join("img"), encode_idx_images(4, 28, 28, &pixels)).unwrap();
        std::fs::write(dir.path().join("lbl"), encode_idx_labels(&[3, 1, 4, 1])).unwrap();
        let ds = load_idx(dir.path().join("img"), dir.path().join("lbl"), Normalization::default()).unwrap();
        assert_eq!(ds.inputs().shape(), &[4, 1, 28, 28]);
        assert_eq!(ds.labels(), &[3, 1, 4, 1]);
        assert_eq!(ds.num_classes(), 5);
        assert_eq!(ds.inputs().data()[0], 1.0);
        assert!((ds.inputs().data()[794] - 0.2).abs() < 1e-15);

        let norm = Normalization { mean: 0.5, std: 0.25 };
        let ds = load_idx(dir.path().join("img"), dir.path().join("lbl"), norm).unwrap();
        assert_eq!(ds.inputs().data()[0], 2.0);
        assert_eq!(ds.inputs().data()[1], -2.0);
    }

    #[test]
    fn idx_count_mismatch_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img"), encode_idx_images(2, 2, 2, &[0; 8])).unwrap();
        std::fs::write(dir.path().join("lbl"), encode_idx_labels(&[1, 2, 3])).unwrap();
        assert!(load_idx(dir.path().join("img"), dir.path().join("lbl"), Normalization::default()).is_err());
        assert!(parse_idx_labels(&encode_idx_images(1, 1, 1, &[0])).is_err());
        let mut truncated = encode_idx_images(2, 2, 2, &[0; 8]);
        truncated.pop();
        assert!(parse_idx_images(&truncated, Normalization::default()).is_err());
    }

    #[test]
    fn csv_examples() {
        let ds = parse_csv("1,0.5,0.5").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample_shape(), &[2]);
        assert_eq!(ds.labels(), &[1]);

        let ds = parse_csv("label,x,y\n0,1,2\n1,3,4\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.inputs().data(), &[1.0, 2.0, 3.0, 4.0]);

        let err = parse_csv("0,1,2\n1,3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("ragged"), "{err}");
        let err = parse_csv("0,1\nx,2\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn batch_and_take() {
        let ds = parse_csv("0,1,2\n1,3,4\n2,5,6\n").unwrap();
        let (x, y) = ds.batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(y, vec![2, 0]);
        assert_eq!(ds.take(2).unwrap().len(), 2);
        assert!(ds.take(4).is_err());
    }
}
