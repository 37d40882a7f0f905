use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{normalize_byte, Dataset};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn header(r: &mut Reader<'_>, magic: u32) -> Result<()> {
    let got = r.u32_be("magic")?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {got:#010x}, expected {magic:#010x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Grayscale is replicated to three channels.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let label_bytes = fs::read(lp).map_err(|e| Error::io(lp, e))?;

    let mut r = Reader {
        bytes: &image_bytes,
        pos: 0,
    };
    header(&mut r, IDX_IMAGES_MAGIC)?;
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    if rows != cols || rows == 0 {
        return Err(Error::Format {
            offset: 8,
            msg: format!("images must be square and non-empty, got {rows}x{cols}"),
        });
    }
    let pixels = r.take(count * rows * cols, "pixel data")?;

    let mut r = Reader {
        bytes: &label_bytes,
        pos: 0,
    };
    header(&mut r, IDX_LABELS_MAGIC)?;
    let label_count = r.u32_be("label count")? as usize;
    let raw_labels = r.take(label_count, "label data")?;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 {
        return Err(Error::Consistency("IDX file holds no images".into()));
    }

    let plane = rows * cols;
    let mut data = Vec::with_capacity(count * 3 * plane);
    for img in pixels.chunks_exact(plane) {
        for _ in 0..3 {
            data.extend(img.iter().map(|&b| normalize_byte(b)));
        }
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    let images = Tensor::from_vec(&[count, 3, rows, cols], data)?;
    let name = ip
        .file_name()
        .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(images, labels, class_count, name)
}
