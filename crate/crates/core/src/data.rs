//! Datasets: synthetic hypersphere clusters, IDX ingestion, base/novel
//! partitioning, n-shot support sampling and input augmentation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, l2_normalize, seeded_rng};

pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Vector,
    Image { rows: usize, cols: usize },
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Vector => "vector",
            Modality::Image { .. } => "image",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    /// Class ids in catalog order.
    pub catalog: Vec<u32>,
    pub split: Split,
    pub modality: Modality,
}

impl LabeledDataset {
    pub fn new(
        examples: Vec<Vec<f64>>,
        labels: Vec<u32>,
        catalog: Vec<u32>,
        split: Split,
        modality: Modality,
    ) -> Result<Self> {
        if examples.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: examples.len(),
                labels: labels.len(),
            });
        }
        let known: BTreeSet<u32> = catalog.iter().copied().collect();
        if known.len() != catalog.len() {
            return Err(Error::InvalidConfig("catalog contains duplicate classes".into()));
        }
        if let Some(l) = labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::MissingClassColumn(*l));
        }
        if let Some(first) = examples.first() {
            if examples.iter().any(|e| e.len() != first.len()) {
                return Err(Error::InvalidShape("examples have differing lengths".into()));
            }
        }
        Ok(LabeledDataset {
            examples,
            labels,
            catalog,
            split,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        match self.modality {
            Modality::Image { rows, cols } => rows * cols,
            Modality::Vector => self.examples.first().map_or(0, Vec::len),
        }
    }

    pub fn indices_of(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Examples whose label is in `classes`, catalog restricted accordingly.
    pub fn restrict(&self, classes: &[u32]) -> LabeledDataset {
        let keep: BTreeSet<u32> = classes.iter().copied().collect();
        let (examples, labels) = self
            .examples
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| keep.contains(l))
            .map(|(e, &l)| (e.clone(), l))
            .unzip();
        LabeledDataset {
            examples,
            labels,
            catalog: self.catalog.iter().copied().filter(|c| keep.contains(c)).collect(),
            split: self.split,
            modality: self.modality,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 200,
            per_class_train: 20,
            per_class_test: 10,
            input_dim: 32,
            noise_sigma: 0.15,
            min_angle_deg: 15.0,
            seed: 0,
        }
    }
}

const CENTER_ATTEMPTS_PER_CLASS: usize = 1000;

/// Class centers uniform on the unit sphere with a minimum pairwise angle.
pub fn sample_centers(cfg: &SyntheticConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = seeded_rng(cfg.seed, &[0xce17e5]);
    let max_cos = cfg.min_angle_deg.to_radians().cos();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while centers.len() < cfg.num_classes {
        if attempts >= CENTER_ATTEMPTS_PER_CLASS * cfg.num_classes {
            return Err(Error::CenterPackingFailure {
                classes: cfg.num_classes,
                min_angle_deg: cfg.min_angle_deg,
            });
        }
        attempts += 1;
        let v: Vec<f64> = (0..cfg.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let Ok(u) = l2_normalize(&v) else { continue };
        if centers.iter().all(|c| dot(c, &u) <= max_cos) {
            centers.push(u);
        }
    }
    Ok(centers)
}

/// Train and test sets drawn around shared class centers.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig("synthetic data needs at least 2 classes".into()));
    }
    if cfg.input_dim < 2 {
        return Err(Error::InvalidConfig("synthetic input_dim must be at least 2".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {} invalid", cfg.noise_sigma)));
    }
    let centers = sample_centers(cfg)?;
    let catalog: Vec<u32> = (0..cfg.num_classes as u32).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let draw = |split: u64, per_class: usize| {
        let mut rng = seeded_rng(cfg.seed, &[0xda7a, split]);
        let mut examples = Vec::with_capacity(per_class * cfg.num_classes);
        let mut labels = Vec::with_capacity(per_class * cfg.num_classes);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                examples.push(center.iter().map(|c| c + noise.sample(&mut rng)).collect());
                labels.push(label as u32);
            }
        }
        (examples, labels)
    };
    let (train_x, train_y) = draw(0, cfg.per_class_train);
    let (test_x, test_y) = draw(1, cfg.per_class_test);
    Ok((
        LabeledDataset::new(train_x, train_y, catalog.clone(), Split::Train, Modality::Vector)?,
        LabeledDataset::new(test_x, test_y, catalog, Split::Test, Modality::Vector)?,
    ))
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::TruncatedFile {
        needed: offset + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
}

/// Parses an IDX image file: returns `(rows, cols, images)` with pixel
/// intensities rescaled from `[0, 255]` to `[−1, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            needed,
            available: bytes.len(),
        });
    }
    let images = bytes[16..needed]
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| f64::from(p) / 127.5 - 1.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABEL_MAGIC,
            found: magic,
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile {
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].iter().map(|&b| u32::from(b)).collect())
}

/// Loads an IDX image/label pair. The catalog is the sorted set of labels.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_dataset(&img_bytes, &lbl_bytes, split)
}

pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    let (rows, cols, images) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    let catalog: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    LabeledDataset::new(images, labels, catalog, split, Modality::Image { rows, cols })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseNovelSplit {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
}

/// First `base_count` catalog classes are base, the rest novel.
pub fn split_base_novel(catalog: &[u32], base_count: usize) -> Result<BaseNovelSplit> {
    if base_count == 0 || base_count >= catalog.len() {
        return Err(Error::InvalidBaseCount {
            base: base_count,
            classes: catalog.len(),
        });
    }
    Ok(BaseNovelSplit {
        base: catalog[..base_count].to_vec(),
        novel: catalog[base_count..].to_vec(),
    })
}

/// The `n` exemplars of one novel class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub label: u32,
    pub examples: Vec<Vec<f64>>,
    /// Row indices into the training split the examples were taken from.
    pub indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(label: u32, examples: Vec<Vec<f64>>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(SupportSet {
            label,
            examples,
            indices: Vec::new(),
        })
    }
}

/// Draws `n` training examples per novel class without replacement.
/// Each class uses its own stream so selections do not depend on which
/// other classes are requested.
pub fn sample_support(train: &LabeledDataset, novel: &[u32], n: usize, seed: u64) -> Result<Vec<SupportSet>> {
    if train.split != Split::Train {
        return Err(Error::InvalidConfig("support sets must come from the train split".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    novel
        .iter()
        .map(|&label| {
            let pool = train.indices_of(label);
            if pool.len() < n {
                return Err(Error::InsufficientExamples {
                    label,
                    requested: n,
                    available: pool.len(),
                });
            }
            let mut rng = seeded_rng(seed, &[0x5099, u64::from(label)]);
            let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            Ok(SupportSet {
                label,
                examples: picked.iter().map(|&i| train.examples[i].clone()).collect(),
                indices: picked,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentKind {
    HorizontalFlip,
    /// Crop a window up to `max_trim` pixels smaller per side and resize back.
    CropResize { max_trim: usize },
    /// Random flip followed by crop-resize.
    FlipCrop { max_trim: usize },
    Jitter { sigma: f64 },
}

impl AugmentKind {
    fn name(self) -> &'static str {
        match self {
            AugmentKind::HorizontalFlip => "flip",
            AugmentKind::CropResize { .. } => "crop",
            AugmentKind::FlipCrop { .. } => "flip-crop",
            AugmentKind::Jitter { .. } => "jitter",
        }
    }

    /// The augmentation used by default for a modality.
    pub fn default_for(modality: Modality, jitter_sigma: f64) -> Self {
        match modality {
            Modality::Vector => AugmentKind::Jitter { sigma: jitter_sigma },
            Modality::Image { rows, cols } => AugmentKind::FlipCrop {
                max_trim: (rows.min(cols) / 8).max(1),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn crop_window(rows: usize, cols: usize, max_trim: usize, rng: &mut impl Rng) -> CropWindow {
    let trim = rng.random_range(0..=max_trim.min(rows - 1).min(cols - 1));
    CropWindow {
        top: rng.random_range(0..=trim),
        left: rng.random_range(0..=trim),
        height: rows - trim,
        width: cols - trim,
    }
}

pub fn flip_horizontal(image: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(image.len());
    for r in 0..rows {
        out.extend(image[r * cols..(r + 1) * cols].iter().rev());
    }
    out
}

/// Bilinear resample of `window` back to `rows × cols`.
pub fn crop_resize(image: &[f64], rows: usize, cols: usize, window: CropWindow) -> Vec<f64> {
    let sample_axis = |i: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        if out_len == 1 || in_len == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let px = |r: usize, c: usize| image[(window.top + r) * cols + window.left + c];
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1, fr) = sample_axis(r, rows, window.height);
        for c in 0..cols {
            let (c0, c1, fc) = sample_axis(c, cols, window.width);
            let top = px(r0, c0) * (1.0 - fc) + px(r0, c1) * fc;
            let bottom = px(r1, c0) * (1.0 - fc) + px(r1, c1) * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

pub fn augment(example: &[f64], modality: Modality, kind: AugmentKind, seed: u64) -> Result<Vec<f64>> {
    let mut rng = seeded_rng(seed, &[0xa06]);
    augment_with(example, modality, kind, &mut rng)
}

pub fn augment_with(example: &[f64], modality: Modality, kind: AugmentKind, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let unsupported = || Error::UnsupportedModality {
        kind: kind.name(),
        modality: modality.name(),
    };
    match (kind, modality) {
        (AugmentKind::Jitter { sigma }, Modality::Vector) => {
            if sigma == 0.0 {
                return Ok(example.to_vec());
            }
            let noise = Normal::new(0.0, sigma).map_err(|_| Error::InvalidConfig(format!("jitter sigma {sigma}")))?;
            Ok(example.iter().map(|v| v + noise.sample(rng)).collect())
        }
        (AugmentKind::HorizontalFlip, Modality::Image { rows, cols }) => Ok(flip_horizontal(example, rows, cols)),
        (AugmentKind::CropResize { max_trim }, Modality::Image { rows, cols }) => {
            let w = crop_window(rows, cols, max_trim, rng);
            Ok(crop_resize(example, rows, cols, w))
        }
        (AugmentKind::FlipCrop { max_trim }, Modality::Image { rows, cols }) => {
            let flipped = if rng.random_bool(0.5) {
                flip_horizontal(example, rows, cols)
            } else {
                example.to_vec()
            };
            let w = crop_window(rows, cols, max_trim, rng);
            Ok(crop_resize(&flipped, rows, cols, w))
        }
        _ => Err(unsupported()),
    }
}
