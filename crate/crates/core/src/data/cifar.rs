//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! 1024 red, 1024 green and 1024 blue pixel bytes (row-major 32×32).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const RECORD_BYTES: usize = 3073;
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

fn normalization_note() -> String {
    format!("pixels/255 normalized with mean {CIFAR10_MEAN:?} std {CIFAR10_STD:?}")
}

fn parse_records(bytes: &[u8], path: &Path, pixels: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let fail = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(fail(format!(
            "length {} is not a multiple of the {RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    for (k, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(fail(format!("record {k} has label {label}, expected 0-9")));
        }
        labels.push(label);
        for (ch, plane) in record[1..].chunks_exact(1024).enumerate() {
            let (mean, std) = (CIFAR10_MEAN[ch], CIFAR10_STD[ch]);
            pixels.extend(plane.iter().map(|&p| (p as f32 / 255.0 - mean) / std));
        }
    }
    Ok(())
}

fn read_files(dir: &Path, names: &[&str]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Dataset {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        parse_records(&bytes, &path, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Dataset {
            path: dir.to_path_buf(),
            reason: "no records".into(),
        });
    }
    Dataset::new(
        DenseTensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        CIFAR10_CLASSES,
        format!("cifar10 {}: {}", dir.display(), normalization_note()),
    )
}

/// Reads a single batch file.
pub fn load_cifar_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Dataset {
        path: path.to_path_buf(),
        reason: "not a file path".into(),
    })?;
    read_files(dir, &[name])
}

/// `(train, test)` from the five training batches and the test batch in `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((read_files(dir, &TRAIN_FILES)?, read_files(dir, &[TEST_FILE])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, 3072));
        r
    }

    #[test]
    fn ten_records() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..10).flat_map(|k| record(k as u8, 255)).collect();
        assert_eq!(bytes.len(), 30_730);
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, bytes).unwrap();
        let d = load_cifar_file(&path).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.labels, (0..10).collect::<Vec<_>>());
        let first = d.images.data()[0];
        assert!((first - (1.0 - 0.4914) / 0.2470).abs() < 1e-6);
        // blue plane of the first image
        let blue = d.images.data()[2048];
        assert!((blue - (1.0 - 0.4465) / 0.2616).abs() < 1e-6);
    }

    #[test]
    fn bad_length_and_label_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        fs::write(&path, vec![0u8; 3074]).unwrap();
        assert!(matches!(load_cifar_file(&path), Err(Error::Dataset { .. })));
        fs::write(&path, record(255, 0)).unwrap();
        let err = load_cifar_file(&path).unwrap_err().to_string();
        assert!(err.contains("label 255"), "{err}");
    }

    #[test]
    fn missing_directory_is_reported() {
        let err = load_cifar10("/nonexistent/cifar").unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }));
    }

    #[test]
    fn full_layout_counts() {
        let dir = tempfile::tempdir().unwrap();
        for name in TRAIN_FILES {
            fs::write(dir.path().join(name), (0..3).flat_map(|k| record(k, 0)).collect::<Vec<_>>()).unwrap();
        }
        fs::write(dir.path().join(TEST_FILE), record(1, 0)).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 1);
    }
}
