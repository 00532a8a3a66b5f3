//! Dataset ingestion: IDX (MNIST family) and CIFAR-10 binary.
//!
//! Images are normalized to mean 0 / unit variance with the published
//! per-dataset statistics. `.gz` files are decompressed transparently.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::NamedRng;
use crate::tensor::{Shape4, Tensor4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// One split: normalized images plus class labels.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub images: Tensor4<f32>,
    pub labels: Vec<u8>,
    pub split: SplitTag,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given sample indices into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor4<f32>, Vec<usize>) {
        let s = self.images.shape();
        let sample = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i] as usize);
        }
        (
            Tensor4::from_vec(Shape4::new(indices.len(), s.c, s.h, s.w), data),
            labels,
        )
    }

    /// First `n` samples (or fewer when the split is smaller).
    pub fn head(&self, n: usize) -> (Tensor4<f32>, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }
}

/// A loaded dataset with a held-out validation carve.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub num_classes: usize,
    /// `(channels, height, width)` of one sample.
    pub input: (usize, usize, usize),
}

/// Opens a file, decompressing when the path (or its `.gz` sibling) is
/// gzip-compressed.
fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let actual: PathBuf = if path.exists() {
        path.to_path_buf()
    } else {
        let gz = PathBuf::from(format!("{}.gz", path.display()));
        if gz.exists() {
            gz
        } else {
            return Err(Error::data(format!("dataset file not found: {}", path.display())));
        }
    };
    let file = File::open(&actual)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", actual.display())))?;
    let mut bytes = Vec::new();
    if actual.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("cannot decompress {}: {e}", actual.display())))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", actual.display())))?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::data(format!(
            "{}: truncated header, needed {} bytes but file has {}",
            path.display(),
            end,
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Raw IDX image file: `(pixels, count, rows, cols)`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_file_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!(
            "{}: bad image magic {magic:#010x} at byte offset 0, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "{}: truncated image data, expected {expected} bytes ({n} x {rows}x{cols} + 16 header) \
             but file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((bytes[16..].to_vec(), n, rows, cols))
}

/// Raw IDX label file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file_bytes(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!(
            "{}: bad label magic {magic:#010x} at byte offset 0, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "{}: truncated label data, expected {expected} bytes but file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Writes an IDX image file (big-endian header, raw bytes). Fixture and
/// synthetic-dataset helper.
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))
}

/// Normalization statistics per dataset name.
fn stats(name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    match name {
        "mnist" => Ok((vec![0.1307], vec![0.3081])),
        "fashion-mnist" => Ok((vec![0.2860], vec![0.3530])),
        "cifar10" => Ok((
            vec![0.4914, 0.4822, 0.4465],
            vec![0.2470, 0.2435, 0.2616],
        )),
        other => Err(Error::config(format!(
            "unknown dataset '{other}' (expected mnist, fashion-mnist, or cifar10)"
        ))),
    }
}

fn normalize(pixels: &[u8], shape: Shape4, mean: &[f64], std: &[f64]) -> Tensor4<f32> {
    let plane = shape.h * shape.w;
    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane) % shape.c;
            ((p as f64 / 255.0 - mean[c]) / std[c]) as f32
        })
        .collect();
    Tensor4::from_vec(shape, data)
}

fn idx_split(
    dir: &Path,
    images_name: &str,
    labels_name: &str,
    tag: SplitTag,
    mean: &[f64],
    std: &[f64],
) -> Result<DatasetSplit> {
    let (pixels, n, rows, cols) = load_idx_images(&dir.join(images_name))?;
    let labels = load_idx_labels(&dir.join(labels_name))?;
    if labels.len() != n {
        return Err(Error::data(format!(
            "{dir:?}: {n} images but {} labels ({images_name} vs {labels_name})",
            labels.len(),
            dir = dir.display(),
        )));
    }
    let shape = Shape4::new(n, 1, rows, cols);
    Ok(DatasetSplit {
        images: normalize(&pixels, shape, mean, std),
        labels,
        split: tag,
    })
}

fn cifar_split(paths: &[PathBuf], tag: SplitTag, mean: &[f64], std: &[f64]) -> Result<DatasetSplit> {
    let mut pixels: Vec<u8> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for path in paths {
        let bytes = read_file_bytes(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::data(format!(
                "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::data(format!(
                    "{}: label {} out of range",
                    path.display(),
                    rec[0]
                )));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let shape = Shape4::new(labels.len(), 3, 32, 32);
    Ok(DatasetSplit {
        images: normalize(&pixels, shape, mean, std),
        labels,
        split: tag,
    })
}

fn carve_val(mut train: DatasetSplit, val_size: usize, seed: u64) -> (DatasetSplit, DatasetSplit) {
    let n = train.len();
    let val_size = val_size.min(n / 2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = NamedRng::new(seed, "split");
    order.shuffle(&mut rng);

    let (val_idx, train_idx) = order.split_at(val_size);
    let (vx, vl) = train.gather(val_idx);
    let (tx, tl) = train.gather(train_idx);
    train.images = tx;
    train.labels = tl.into_iter().map(|l| l as u8).collect();
    let val = DatasetSplit {
        images: vx,
        labels: vl.into_iter().map(|l| l as u8).collect(),
        split: SplitTag::Val,
    };
    (train, val)
}

/// Validation carve size: capped at 2048 samples, never more than half the
/// training split.
pub const VAL_SIZE: usize = 2048;

/// Loads a dataset by name, normalizes it, and carves a deterministic
/// validation split out of the training data (seeded by `seed`, independent
/// of all other streams).
pub fn load_dataset(name: &str, dir: &Path, seed: u64) -> Result<Dataset> {
    let (mean, std) = stats(name)?;
    let (train_full, test) = match name {
        "mnist" | "fashion-mnist" => (
            idx_split(
                dir,
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                SplitTag::Train,
                &mean,
                &std,
            )?,
            idx_split(
                dir,
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
                SplitTag::Test,
                &mean,
                &std,
            )?,
        ),
        "cifar10" => {
            let train_paths: Vec<PathBuf> =
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                cifar_split(&train_paths, SplitTag::Train, &mean, &std)?,
                cifar_split(&[dir.join("test_batch.bin")], SplitTag::Test, &mean, &std)?,
            )
        }
        other => return Err(Error::config(format!("unknown dataset '{other}'"))),
    };

    let num_classes = 10;
    for split in [&train_full, &test] {
        if let Some(&bad) = split.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::data(format!("label {bad} out of range for {num_classes} classes")));
        }
    }

    let shape = train_full.images.shape();
    let input = (shape.c, shape.h, shape.w);
    let (train, val) = carve_val(train_full, VAL_SIZE, seed);
    Ok(Dataset {
        name: name.to_string(),
        train,
        val,
        test,
        num_classes,
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn synthetic_idx_fixture_roundtrips() {
        let dir = fixture_dir();
        let pixels: Vec<u8> = (0..4 * 5 * 6).map(|i| (i % 251) as u8).collect();
        let labels = vec![0u8, 3, 9, 1];
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labs");
        write_idx_images(&ip, &pixels, 4, 5, 6).unwrap();
        write_idx_labels(&lp, &labels).unwrap();

        let (px, n, r, c) = load_idx_images(&ip).unwrap();
        assert_eq!((n, r, c), (4, 5, 6));
        assert_eq!(px, pixels);
        assert_eq!(load_idx_labels(&lp).unwrap(), labels);
    }

    #[test]
    fn truncated_file_names_expected_and_actual_bytes() {
        let dir = fixture_dir();
        let pixels: Vec<u8> = vec![7; 4 * 5 * 6];
        let ip = dir.path().join("imgs");
        write_idx_images(&ip, &pixels, 4, 5, 6).unwrap();
        let full = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &full[..full.len() - 10]).unwrap();

        let err = load_idx_images(&ip).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 136 bytes"), "{msg}");
        assert!(msg.contains("has 126"), "{msg}");
    }

    #[test]
    fn magic_mismatch_is_reported_with_offset() {
        let dir = fixture_dir();
        let lp = dir.path().join("labs");
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        let err = load_idx_images(&lp).unwrap_err();
        assert!(err.to_string().contains("byte offset 0"), "{err}");
    }

    #[test]
    fn image_label_count_mismatch_is_a_distinct_error() {
        let dir = fixture_dir();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), &[0; 3 * 4], 3, 2, 2).unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &[1, 2]).unwrap();
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &[0; 4], 1, 2, 2).unwrap();
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &[1]).unwrap();
        let err = load_dataset("mnist", dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("3 images but 2 labels"), "{err}");
    }

    #[test]
    fn gz_files_load_transparently() {
        let dir = fixture_dir();
        let pixels: Vec<u8> = (0..2 * 4).map(|i| i as u8).collect();
        let plain = dir.path().join("imgs");
        write_idx_images(&plain, &pixels, 2, 2, 2).unwrap();
        let raw = std::fs::read(&plain).unwrap();
        let gz = dir.path().join("imgs2.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        std::io::Write::write_all(&mut enc, &raw).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();

        // Asking for "imgs2" discovers the .gz sibling.
        let (px, n, _, _) = load_idx_images(&dir.path().join("imgs2")).unwrap();
        assert_eq!(n, 2);
        assert_eq!(px, pixels);
    }

    #[test]
    fn val_carve_is_deterministic_and_disjoint() {
        let dir = fixture_dir();
        let n = 40usize;
        let pixels: Vec<u8> = (0..n * 16).map(|i| (i * 37 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), &pixels, n, 4, 4).unwrap();
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), &labels).unwrap();
        write_idx_images(&dir.path().join("t10k-images-idx3-ubyte"), &pixels[..16 * 4], 4, 4, 4).unwrap();
        write_idx_labels(&dir.path().join("t10k-labels-idx1-ubyte"), &labels[..4]).unwrap();

        let a = load_dataset("mnist", dir.path(), 5).unwrap();
        let b = load_dataset("mnist", dir.path(), 5).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.val.labels, b.val.labels);
        assert_eq!(a.train.len() + a.val.len(), n);
        assert_eq!(a.val.len(), n / 2); // VAL_SIZE capped at half

        let c = load_dataset("mnist", dir.path(), 6).unwrap();
        assert_ne!(a.val.labels, c.val.labels, "different seed should reshuffle");
    }

    #[test]
    fn cifar_records_parse_and_reject_bad_sizes() {
        let dir = fixture_dir();
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat(128u8).take(3072));
        }
        let p = dir.path().join("test_batch.bin");
        std::fs::write(&p, &bytes).unwrap();
        let split = cifar_split(&[p.clone()], SplitTag::Test, &[0.5, 0.5, 0.5], &[0.25, 0.25, 0.25]).unwrap();
        assert_eq!(split.len(), 3);
        assert_eq!(split.images.shape(), Shape4::new(3, 3, 32, 32));

        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        let err = cifar_split(&[p], SplitTag::Test, &[0.5; 3], &[0.25; 3]).unwrap_err();
        assert!(err.to_string().contains("3073-byte record"), "{err}");
    }
}
