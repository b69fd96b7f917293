//! CIFAR-10 records, normalization statistics, pad-crop-flip augmentation
//! and reproducible batching.
//!
//! The byte layout is the canonical binary batch format: each record is one
//! label byte followed by 3,072 pixel bytes (1,024 R, then G, then B, each
//! plane row-major 32x32).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_RECORDS: usize = 50_000;
pub const TEST_RECORDS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("{source_name}: truncated record at byte offset {offset} ({len} bytes total, records are {RECORD_BYTES} bytes)")]
    Truncated { source_name: String, offset: usize, len: usize },
    #[error("{source_name}: label {label} at byte offset {offset} is outside 0..=9")]
    BadLabel { source_name: String, offset: usize, label: u8 },
    #[error("dataset is empty")]
    Empty,
    #[error("channel {channel} has zero standard deviation")]
    DegenerateStd { channel: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),
}

pub type Result<T> = core::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Parses one binary batch into `(pixels, labels)`. `source_name` only feeds
/// diagnostics.
pub fn parse_batch(bytes: &[u8], source_name: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(DataError::Truncated {
            source_name: source_name.into(),
            offset: bytes.len() / RECORD_BYTES * RECORD_BYTES,
            len: bytes.len(),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0];
        if label as usize >= NUM_CLASSES {
            return Err(DataError::BadLabel {
                source_name: source_name.into(),
                offset: i * RECORD_BYTES,
                label,
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Images are kept as raw bytes and scaled to `[0, 1]` on access.
#[derive(Debug, Clone, PartialEq)]
pub struct Cifar10Set {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
}

impl Cifar10Set {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_BYTES {
            return Err(DataError::Invalid(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(DataError::Invalid(format!("label {bad} out of range")));
        }
        Ok(Self { pixels, labels, split })
    }

    pub fn from_batches<'a>(batches: impl IntoIterator<Item = (&'a str, &'a [u8])>, split: Split) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (name, bytes) in batches {
            let (p, l) = parse_batch(bytes, name)?;
            pixels.extend(p);
            labels.extend(l);
        }
        Self::new(pixels, labels, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    /// `3 x 32 x 32` values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        self.image_bytes(i).iter().map(|&b| b as f64 / 255.0).collect()
    }

    /// The first `n` records (all of them if `n >= len`).
    pub fn subset(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * IMAGE_BYTES].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    /// Re-encodes the set in the binary batch layout.
    pub fn encode_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image_bytes(i));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// Exact per-channel mean and population standard deviation over every
/// pixel of the set.
pub fn compute_norm_stats(set: &Cifar10Set) -> Result<NormStats> {
    if set.is_empty() {
        return Err(DataError::Empty);
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut sum = [0u64; 3];
    let mut sum_sq = [0u64; 3];
    for i in 0..set.len() {
        for (c, chunk) in set.image_bytes(i).chunks_exact(plane).enumerate() {
            for &b in chunk {
                sum[c] += b as u64;
                sum_sq[c] += (b as u64) * (b as u64);
            }
        }
    }
    let count = (set.len() * plane) as f64;
    let mut stats = NormStats::IDENTITY;
    for c in 0..3 {
        let mean = sum[c] as f64 / count;
        let var = (sum_sq[c] as f64 / count - mean * mean).max(0.0);
        let std = libm::sqrt(var) / 255.0;
        if !(std > 0.0) {
            return Err(DataError::DegenerateStd { channel: c });
        }
        stats.mean[c] = mean / 255.0;
        stats.std[c] = std;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl AugmentConfig {
    /// 4-pixel pad-and-crop, horizontal flip with probability 0.5.
    pub fn standard(stats: NormStats) -> Self {
        Self {
            pad: 4,
            flip_prob: 0.5,
            mean: stats.mean,
            std: stats.std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::InvalidAugment(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::InvalidAugment("std must be positive".into()));
        }
        Ok(())
    }
}

/// One augmentation draw: crop origin inside the padded canvas and flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl CropDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let dy = rng.gen_range(0..=2 * cfg.pad);
        let dx = rng.gen_range(0..=2 * cfg.pad);
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        Self { dy, dx, flip }
    }
}

/// Crops a `32 x 32` window at `(dy, dx)` of the zero-padded canvas,
/// optionally mirrors it, then normalizes.
pub fn augment_with(image: &[f64], cfg: &AugmentConfig, draw: CropDraw) -> Vec<f64> {
    assert_eq!(image.len(), IMAGE_BYTES, "augment expects a 3x32x32 image");
    let s = IMAGE_SIDE;
    let pad = cfg.pad;
    let mut out = Vec::with_capacity(IMAGE_BYTES);
    for c in 0..3 {
        let plane = &image[c * s * s..(c + 1) * s * s];
        for y in 0..s {
            for x in 0..s {
                let cx = if draw.flip { s - 1 - x } else { x };
                // canvas coordinates are shifted by `pad`
                let sy = (y + draw.dy).checked_sub(pad).filter(|&v| v < s);
                let sx = (cx + draw.dx).checked_sub(pad).filter(|&v| v < s);
                let v = match (sy, sx) {
                    (Some(sy), Some(sx)) => plane[sy * s + sx],
                    _ => 0.0,
                };
                out.push((v - cfg.mean[c]) / cfg.std[c]);
            }
        }
    }
    out
}

pub fn augment(image: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let draw = CropDraw::sample(cfg, rng);
    augment_with(image, cfg, draw)
}

pub fn normalize(image: &[f64], mean: &[f64; 3], std: &[f64; 3]) -> Vec<f64> {
    let plane = image.len() / 3;
    image
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            (v - mean[c]) / std[c]
        })
        .collect()
}

/// RNG for one epoch: seeded by `seed`, stream selected by `epoch`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Sample order for one epoch: a seeded permutation for the training split,
/// identity order otherwise.
pub fn epoch_order(len: usize, split: Split, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if split == Split::Train {
        order.shuffle(&mut epoch_rng(seed, epoch));
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(B, 3, 32, 32)`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Iterator over one epoch of batches. The training split is shuffled and
/// augmented; the test split is normalized only. The last batch may be short.
pub struct Batches<'a> {
    set: &'a Cifar10Set,
    cfg: AugmentConfig,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let mut data = Vec::with_capacity(idx.len() * IMAGE_BYTES);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let img = self.set.image(i);
            let out = match self.set.split() {
                Split::Train => augment(&img, &self.cfg, &mut self.rng),
                Split::Test => normalize(&img, &self.cfg.mean, &self.cfg.std),
            };
            data.extend(out);
            labels.push(self.set.label(i));
        }
        let images = Tensor::new(&[idx.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data).expect("batch shape");
        Some(Batch { images, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

pub fn batches<'a>(set: &'a Cifar10Set, batch_size: usize, shuffle_seed: u64, epoch: usize, cfg: &AugmentConfig) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch_size must be at least 1".into()));
    }
    cfg.validate()?;
    let order = epoch_order(set.len(), set.split(), shuffle_seed, epoch);
    // augmentation draws use a stream disjoint from the permutation's
    let rng = epoch_rng(shuffle_seed ^ 0xA5A5_5A5A_0F0F_F0F0, epoch);
    Ok(Batches {
        set,
        cfg: *cfg,
        order,
        batch_size,
        cursor: 0,
        rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..IMAGE_BYTES).map(fill));
        r
    }

    fn synthetic(n: usize, split: Split) -> Cifar10Set {
        let mut bytes = Vec::new();
        for i in 0..n {
            bytes.extend(record((i % 10) as u8, |p| ((p * 7 + i * 13) % 256) as u8));
        }
        Cifar10Set::from_batches([("synthetic", bytes.as_slice())], split).unwrap()
    }

    #[test]
    fn label_out_of_range_names_offset() {
        let mut bytes = record(3, |_| 0);
        bytes.extend(record(11, |_| 0));
        match parse_batch(&bytes, "data_batch_1.bin") {
            Err(DataError::BadLabel { offset, label, source_name }) => {
                assert_eq!(offset, RECORD_BYTES);
                assert_eq!(label, 11);
                assert_eq!(source_name, "data_batch_1.bin");
            }
            other => panic!("expected BadLabel, got {other:?}"),
        }
    }

    #[test]
    fn truncated_record_rejected() {
        let mut bytes = record(1, |_| 9);
        bytes.extend_from_slice(&[2, 3, 4]);
        assert!(matches!(parse_batch(&bytes, "x"), Err(DataError::Truncated { offset, .. }) if offset == RECORD_BYTES));
    }

    #[test]
    fn all_255_scales_to_one() {
        let bytes = record(0, |_| 255);
        let set = Cifar10Set::from_batches([("x", bytes.as_slice())], Split::Test).unwrap();
        assert!(set.image(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_images_have_degenerate_std() {
        let bytes: Vec<u8> = (0..3).flat_map(|_| record(0, |_| 128)).collect();
        let set = Cifar10Set::from_batches([("x", bytes.as_slice())], Split::Train).unwrap();
        assert_eq!(compute_norm_stats(&set), Err(DataError::DegenerateStd { channel: 0 }));
        let empty = Cifar10Set::new(Vec::new(), Vec::new(), Split::Train).unwrap();
        assert_eq!(compute_norm_stats(&empty), Err(DataError::Empty));
    }

    #[test]
    fn two_image_stats_by_hand() {
        // image A: R=0, G=51, B=255 ; image B: R=255, G=153, B=255 (except B is 0 in the first half)
        let plane = IMAGE_SIDE * IMAGE_SIDE;
        let a = record(0, |p| [0u8, 51, 255][p / plane]);
        let b = record(1, |p| match p / plane {
            0 => 255,
            1 => 153,
            _ => {
                if p % plane < plane / 2 {
                    0
                } else {
                    255
                }
            }
        });
        let bytes: Vec<u8> = a.into_iter().chain(b).collect();
        let set = Cifar10Set::from_batches([("x", bytes.as_slice())], Split::Train).unwrap();
        let s = compute_norm_stats(&set).unwrap();
        assert!((s.mean[0] - 0.5).abs() < 1e-12);
        assert!((s.std[0] - 0.5).abs() < 1e-12);
        assert!((s.mean[1] - 0.4).abs() < 1e-12);
        assert!((s.std[1] - 0.2).abs() < 1e-12);
        // B: three quarters 255, one quarter 0 -> mean 0.75, std sqrt(0.75*0.25)
        assert!((s.mean[2] - 0.75).abs() < 1e-12);
        assert!((s.std[2] - libm::sqrt(0.1875)).abs() < 1e-12);
    }

    #[test]
    fn centre_crop_without_flip_is_identity() {
        let set = synthetic(1, Split::Train);
        let img = set.image(0);
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let out = augment_with(&img, &cfg, CropDraw { dy: 4, dx: 4, flip: false });
        assert_eq!(out, img);
    }

    #[test]
    fn flip_is_an_involution() {
        let set = synthetic(1, Split::Train);
        let img = set.image(0);
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let draw = CropDraw { dy: 4, dx: 4, flip: true };
        let once = augment_with(&img, &cfg, draw);
        assert_ne!(once, img);
        assert_eq!(augment_with(&once, &cfg, draw), img);
    }

    #[test]
    fn corner_crop_reads_padding_as_zero() {
        let img = vec![1.0; IMAGE_BYTES];
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let out = augment_with(&img, &cfg, CropDraw { dy: 0, dx: 0, flip: false });
        assert_eq!(out[0], 0.0);
        assert_eq!(out[4 * IMAGE_SIDE + 4], 1.0);
        assert_eq!(out.len(), IMAGE_BYTES);
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let set = synthetic(10, Split::Train);
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let sizes: Vec<usize> = batches(&set, 4, 42, 0, &cfg).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&set, 0, 42, 0, &cfg).is_err());
    }

    #[test]
    fn same_seed_and_epoch_replays_exactly() {
        let set = synthetic(20, Split::Train);
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let a: Vec<Batch> = batches(&set, 8, 42, 3, &cfg).unwrap().collect();
        let b: Vec<Batch> = batches(&set, 8, 42, 3, &cfg).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<Batch> = batches(&set, 8, 42, 4, &cfg).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn epoch_covers_every_label_once() {
        let set = synthetic(37, Split::Train);
        let cfg = AugmentConfig::standard(NormStats::IDENTITY);
        let mut seen: Vec<usize> = batches(&set, 5, 7, 1, &cfg).unwrap().flat_map(|b| b.labels).collect();
        let mut expected: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
        seen.sort_unstable();
        expected.sort_unstable();
        assert_eq!(seen, expected);
    }

    #[test]
    fn test_split_is_normalized_only() {
        let set = synthetic(3, Split::Test);
        let stats = NormStats {
            mean: [0.5, 0.4, 0.3],
            std: [0.2, 0.25, 0.5],
        };
        let cfg = AugmentConfig::standard(stats);
        let b = batches(&set, 3, 1, 0, &cfg).unwrap().next().unwrap();
        for i in 0..3 {
            let expected = normalize(&set.image(i), &stats.mean, &stats.std);
            assert_eq!(&b.images.data()[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES], expected.as_slice());
        }
    }

    #[test]
    fn records_reencode_to_source_bytes() {
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.extend(record(i, |p| (p as u8).wrapping_mul(i + 1)));
        }
        let set = Cifar10Set::from_batches([("x", bytes.as_slice())], Split::Test).unwrap();
        assert_eq!(set.encode_records(), bytes);
    }
}
