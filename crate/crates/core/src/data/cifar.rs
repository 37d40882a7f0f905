use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{normalize_byte, Dataset};

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + PIXELS;
const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

impl CifarSplit {
    fn files(self) -> Vec<String> {
        match self {
            CifarSplit::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarSplit::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

fn parse_records(bytes: &[u8], labels: &mut Vec<usize>, pixels: &mut Vec<f32>) -> Result<()> {
    let rem = bytes.len() % CIFAR_RECORD_BYTES;
    if rem != 0 || bytes.is_empty() {
        return Err(Error::Format {
            offset: (bytes.len() - rem) as u64,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = usize::from(rec[0]);
        if label >= CLASSES {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD_BYTES) as u64,
                msg: format!("label {label} outside {CLASSES} classes"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| normalize_byte(b)));
    }
    Ok(())
}

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    parse_records(&bytes, &mut labels, &mut pixels)?;
    finish(labels, pixels, path.display().to_string())
}

/// Loads every batch file of `split` found in `dir`, in canonical order.
pub fn load_cifar_binary(dir: impl AsRef<Path>, split: CifarSplit) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (mut labels, mut pixels) = (Vec::new(), Vec::new());
    let mut found = 0;
    for name in split.files() {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_records(&bytes, &mut labels, &mut pixels)?;
        found += 1;
    }
    if found == 0 {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR batch files"),
        ));
    }
    finish(labels, pixels, format!("cifar10-{split:?}").to_lowercase())
}

fn finish(labels: Vec<usize>, pixels: Vec<f32>, name: String) -> Result<Dataset> {
    let images = Tensor::from_vec(&[labels.len(), 3, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels, CLASSES, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, PIXELS));
        r
    }

    #[test]
    fn one_record_is_one_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record(7, 0);
        rec[1] = 255; // first red pixel
        rec[1 + 1024] = 128; // first green pixel
        let path = dir.path().join("test_batch.bin");
        fs::write(&path, &rec).unwrap();
        let d = load_cifar_binary(dir.path(), CifarSplit::Test).unwrap();
        assert_eq!(d.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(d.labels, vec![7]);
        // 255 maps to 1.0 before normalization, i.e. (1 - 0.5) / 0.5
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.images.data()[1024], normalize_byte(128));
        assert_eq!(d.images.data()[1], -1.0);
    }

    #[test]
    fn partial_record_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(1, 3);
        bytes.extend_from_slice(&[0; 10]);
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, &bytes).unwrap();
        let err = load_cifar_file(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 3073, .. }), "{err}");
    }

    #[test]
    fn train_split_concatenates_batches() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=2u8 {
            let mut bytes = record(i, i);
            bytes.extend(record(i + 2, i));
            fs::write(dir.path().join(format!("data_batch_{i}.bin")), bytes).unwrap();
        }
        let d = load_cifar_binary(dir.path(), CifarSplit::Train).unwrap();
        assert_eq!(d.labels, vec![1, 3, 2, 4]);
        assert!(load_cifar_binary(dir.path(), CifarSplit::Test).is_err());
    }
}
