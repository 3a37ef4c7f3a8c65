//! Labeled image datasets and MNIST IDX ingestion.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{got:08x} at byte offset {offset} in {path} (expected 0x{want:08x})")]
    BadMagic { path: PathBuf, offset: u64, got: u32, want: u32 },
    #[error("truncated file {path}: expected {want} bytes of payload, found {got}")]
    Truncated { path: PathBuf, want: usize, got: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone)]
pub struct DataSample {
    pub image: Tensor,
    pub label: usize,
    pub mask_path: Option<PathBuf>,
    pub fold: Option<usize>,
}

/// In-memory single-label dataset; all images share one spatial side.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<DataSample>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.samples.is_empty() {
            return Err(DataError::Empty);
        }
        let classes = self.class_count();
        for s in &self.samples {
            if s.label >= classes {
                return Err(DataError::LabelOutOfRange { label: s.label, classes });
            }
        }
        Ok(())
    }

    /// Samples whose fold id satisfies the predicate, preserving order.
    pub fn filter_folds(&self, keep: impl Fn(usize) -> bool) -> LabeledDataset {
        LabeledDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.fold.map(&keep).unwrap_or(false))
                .cloned()
                .collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn fold_count(&self) -> usize {
        self.samples.iter().filter_map(|s| s.fold).max().map(|m| m + 1).unwrap_or(0)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut buf = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    Ok(buf)
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Parses the big-endian MNIST IDX pair into a dataset with pixel values
/// scaled to [0, 1].
pub fn parse_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    let img_bytes = read_all(images_path)?;
    let lbl_bytes = read_all(labels_path)?;

    let mut cur = std::io::Cursor::new(&img_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|e| DataError::Io { path: images_path.to_path_buf(), source: e })?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: images_path.to_path_buf(), offset: 0, got: magic, want: IDX_IMAGE_MAGIC });
    }
    let count = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let rows = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let cols = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let pixels = &img_bytes[16.min(img_bytes.len())..];
    let want = count * rows * cols;
    if pixels.len() < want {
        return Err(DataError::Truncated { path: images_path.to_path_buf(), want, got: pixels.len() });
    }

    let mut cur = std::io::Cursor::new(&lbl_bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|e| DataError::Io { path: labels_path.to_path_buf(), source: e })?;
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic { path: labels_path.to_path_buf(), offset: 0, got: magic, want: IDX_LABEL_MAGIC });
    }
    let lbl_count = cur.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let labels = &lbl_bytes[8.min(lbl_bytes.len())..];
    if labels.len() < lbl_count {
        return Err(DataError::Truncated { path: labels_path.to_path_buf(), want: lbl_count, got: labels.len() });
    }
    if lbl_count != count {
        return Err(DataError::CountMismatch { images: count, labels: lbl_count });
    }

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * rows * cols;
        let data: Vec<f32> = pixels[start..start + rows * cols].iter().map(|&b| b as f32 / 255.0).collect();
        let image = Tensor::from_vec((1, 1, rows, cols), data).expect("length checked above");
        samples.push(DataSample { image, label: labels[i] as usize, mask_path: None, fold: None });
    }
    let classes = samples.iter().map(|s| s.label).max().map(|m| m + 1).unwrap_or(0).max(10);
    let class_names = (0..classes).map(|c| c.to_string()).collect();
    let ds = LabeledDataset { samples, class_names };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path, imgs: &[[u8; 4]], labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("imgs.idx3");
        let lp = dir.join("lbls.idx1");
        let mut f = File::create(&ip).unwrap();
        f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(imgs.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for im in imgs {
            f.write_all(im).unwrap();
        }
        let mut f = File::create(&lp).unwrap();
        f.write_all(&IDX_LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[0, 128, 255, 64]], &[7]);
        let ds = parse_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].label, 7);
        let img = &ds.samples[0].image;
        assert_eq!(img.at(0, 0, 0, 0), 0.0);
        assert_eq!(img.at(0, 0, 1, 0), 1.0);
    }

    #[test]
    fn idx_truncated_file_reports_expected_length() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[1, 2, 3, 4]], &[1]);
        // chop two payload bytes off the image file
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        match parse_idx(&ip, &lp) {
            Err(DataError::Truncated { want, got, .. }) => {
                assert_eq!(want, 4);
                assert_eq!(got, 2);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[[1, 2, 3, 4]], &[1]);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, &bytes).unwrap();
        assert!(matches!(parse_idx(&ip, &lp), Err(DataError::BadMagic { offset: 0, .. })));
    }
}
