//! IDX-format dataset ingestion, per-digit filtering and deterministic splits.

use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::rng;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled image collection with shared dimensions; pixels normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub width: usize,
    pub height: usize,
    /// Row-major, image-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * labels.len() {
            return Err(CoreError::dim("pixel buffer does not match label count".to_string()));
        }
        if labels.iter().any(|&l| l > 9) {
            return Err(CoreError::Dataset("labels must be digits 0..9".to_string()));
        }
        Ok(LabeledImageSet { width, height, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.width * self.height;
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn images_of_digit(&self, digit: u8) -> Vec<Image> {
        (0..self.len()).filter(|&i| self.labels[i] == digit).map(|i| self.image(i)).collect()
    }
}

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CoreError::Dataset("truncated IDX header".to_string()))
}

/// Parse an IDX image/label file pair (big-endian headers, magic 0x803 / 0x801, unsigned
/// bytes scaled to `[0, 1]` by division by 255).
pub fn parse_idx(image_path: &Path, label_path: &Path) -> Result<LabeledImageSet> {
    let img_bytes = std::fs::read(image_path)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", image_path.display())))?;
    let lbl_bytes = std::fs::read(label_path)
        .map_err(|e| CoreError::Dataset(format!("{}: {e}", label_path.display())))?;

    if read_u32_be(&img_bytes, 0)? != IDX_IMAGES_MAGIC {
        return Err(CoreError::Dataset(format!("{}: bad IDX image magic", image_path.display())));
    }
    if read_u32_be(&lbl_bytes, 0)? != IDX_LABELS_MAGIC {
        return Err(CoreError::Dataset(format!("{}: bad IDX label magic", label_path.display())));
    }
    let count = read_u32_be(&img_bytes, 4)? as usize;
    let rows = read_u32_be(&img_bytes, 8)? as usize;
    let cols = read_u32_be(&img_bytes, 12)? as usize;
    let lbl_count = read_u32_be(&lbl_bytes, 4)? as usize;
    if count != lbl_count {
        return Err(CoreError::Dataset(format!("{count} images vs {lbl_count} labels")));
    }
    let payload = &img_bytes[16..];
    if payload.len() != count * rows * cols {
        return Err(CoreError::Dataset(format!(
            "image payload {} bytes, expected {}",
            payload.len(),
            count * rows * cols
        )));
    }
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() != count {
        return Err(CoreError::Dataset("label payload truncated".to_string()));
    }
    let pixels: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    LabeledImageSet::new(cols, rows, pixels, lbl_payload.to_vec())
}

/// Standard file names inside a dataset directory.
pub fn load_train(dir: &Path) -> Result<LabeledImageSet> {
    parse_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))
}

pub fn load_test(dir: &Path) -> Result<LabeledImageSet> {
    parse_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))
}

/// Deterministic split of the training file for one ID digit: all of that digit's images
/// minus a held-out full-view validation set. Test images come from the separate official
/// test split, so the pools never overlap.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Image>,
    pub validation: Vec<Image>,
}

pub fn make_splits(train_set: &LabeledImageSet, id_digit: u8, validation_size: usize, seed: u64) -> Result<Splits> {
    let mut indices: Vec<usize> =
        (0..train_set.len()).filter(|&i| train_set.labels[i] == id_digit).collect();
    if indices.len() <= validation_size {
        return Err(CoreError::Dataset(format!(
            "only {} images of digit {id_digit}, cannot hold out {validation_size}",
            indices.len()
        )));
    }
    let mut r = rng::stream(seed, "split", &[id_digit as u64]);
    use rand_chacha::rand_core::RngCore;
    for i in (1..indices.len()).rev() {
        let j = (r.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
    let (val_idx, train_idx) = indices.split_at(validation_size);
    Ok(Splits {
        train: train_idx.iter().map(|&i| train_set.image(i)).collect(),
        validation: val_idx.iter().map(|&i| train_set.image(i)).collect(),
    })
}
