//! Image datasets, the `PRND` file format and train-set splits.
//!
//! `PRND` layout, all integers little-endian `u32`:
//!
//! ```text
//! "PRND" version count channels height width num_classes
//! count * channels*height*width  f32 (little-endian) pixels
//! count                          u8  labels
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Batch, Targets};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PRND";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

/// Labelled images stored as `f32`, converted to `f64` per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], num_classes: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::shape(None, "dataset images must have nonzero extent"));
        }
        if images.len() != per * labels.len() {
            return Err(Error::shape(
                None,
                format!("{} pixels for {} images of {:?}", images.len(), labels.len(), shape),
            ));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Config(format!("num_classes must be in 1..=256, got {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Config(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset { shape, num_classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Stacks the given samples into a classification batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("batch indices"));
        }
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("sample index {i} out of range for {} samples", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| v as f64));
            labels.push(self.labels[i] as usize);
        }
        let [c, h, w] = self.shape;
        Batch::new(Tensor::new(vec![indices.len(), c, h, w], data)?, Targets::Labels(labels))
    }

    /// Consecutive batches of at most `batch_size` covering `indices` in order.
    pub fn batches(&self, indices: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        indices.chunks(batch_size).map(|c| self.batch(c)).collect()
    }

    /// Every sample in order.
    pub fn all_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches(&idx, batch_size)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.images.len() * 4 + self.labels.len());
        out.extend_from_slice(DATASET_MAGIC);
        let [c, h, w] = self.shape;
        for v in [DATASET_VERSION as usize, self.len(), c, h, w, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.images {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, detail: String| Error::Format { format: "PRND", offset: offset as u64, detail };
        if bytes.len() < HEADER_LEN {
            return Err(err(bytes.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(err(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let version = field(0);
        if version != DATASET_VERSION as usize {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let (count, c, h, w, classes) = (field(1), field(2), field(3), field(4), field(5));
        for (i, v) in [c, h, w].into_iter().enumerate() {
            if v == 0 {
                return Err(err(12 + 4 * i, "zero image dimension".into()));
            }
        }
        if classes == 0 || classes > 256 {
            return Err(err(24, format!("num_classes {classes} not in 1..=256")));
        }
        let pixels = count
            .checked_mul(c * h * w)
            .and_then(|p| p.checked_mul(4))
            .ok_or_else(|| err(8, "payload size overflows".into()))?;
        let expected = HEADER_LEN + pixels + count;
        if bytes.len() != expected {
            return Err(err(
                bytes.len().min(expected),
                format!("file is {} bytes, header implies {expected}", bytes.len()),
            ));
        }
        let images = bytes[HEADER_LEN..HEADER_LEN + pixels]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let label_off = HEADER_LEN + pixels;
        let labels = bytes[label_off..].to_vec();
        if let Some(pos) = labels.iter().position(|&y| y as usize >= classes) {
            return Err(err(label_off + pos, format!("label {} >= num_classes {classes}", labels[pos])));
        }
        Ok(Dataset { shape: [c, h, w], num_classes: classes, images, labels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Fractions of the original train set used for retraining and for
/// saliency evaluation; the two index sets are disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub retrain: f64,
    pub eval: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { retrain: 0.8, eval: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub retrain: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.retrain) || !ok(self.eval) || self.retrain + self.eval > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1] and sum to at most 1 (retrain {}, eval {})",
                self.retrain, self.eval
            )));
        }
        Ok(())
    }

    /// Shuffles `0..n` with `seed` and cuts it into the two sets.
    pub fn split(&self, n: usize, seed: u64) -> Result<Split> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = ((n as f64) * self.retrain).round() as usize;
        let e = (((n as f64) * self.eval).round() as usize).min(n - r);
        let eval = idx[r..r + e].to_vec();
        idx.truncate(r);
        Ok(Split { retrain: idx, eval })
    }
}

/// Seeded synthetic datasets.
pub mod synthetic {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::Dataset;

    /// Images built from smooth random class prototypes, each sample shifted
    /// by up to one pixel, rescaled and corrupted by Gaussian noise.
    ///
    /// Sets drawn with the same `prototype_seed` share their classes, so a
    /// train and a test set differ only in `sample_seed`.
    pub fn patterns(
        n: usize,
        shape: [usize; 3],
        num_classes: usize,
        noise: f64,
        prototype_seed: u64,
        sample_seed: u64,
    ) -> Dataset {
        let [c, h, w] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(prototype_seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let protos: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..c * h * w).map(|_| unit.sample(&mut rng)).collect();
                let mut smooth = vec![0.0; raw.len()];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut s = 0.0;
                            let mut k = 0.0;
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        s += raw[(ch * h + yy as usize) * w + xx as usize];
                                        k += 1.0;
                                    }
                                }
                            }
                            smooth[(ch * h + y) * w + x] = 1.5 * s / k;
                        }
                    }
                }
                smooth
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5eed_0000_0000);
        let mut images = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % num_classes;
            let (sy, sx) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
            let gain = rng.random_range(0.8..1.2);
            for ch in 0..c {
                for r in 0..h {
                    for q in 0..w {
                        let (rr, qq) = (r as i64 - sy, q as i64 - sx);
                        let base = if rr >= 0 && qq >= 0 && (rr as usize) < h && (qq as usize) < w {
                            protos[y][(ch * h + rr as usize) * w + qq as usize]
                        } else {
                            0.0
                        };
                        images.push((gain * base + noise * unit.sample(&mut rng)) as f32);
                    }
                }
            }
            labels.push(y as u8);
        }
        Dataset::new(shape, num_classes, images, labels).expect("consistent synthetic data")
    }

    /// Two classes split by the sign of `mean(left half) - mean(right half)`,
    /// with a margin of at least 0.5 between them.
    pub fn separable(n: usize, shape: [usize; 3], seed: u64) -> Dataset {
        let [c, h, w] = shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            let sign = if y == 0 { 1.0 } else { -1.0 };
            let offset = rng.random_range(0.5..1.5) * sign;
            for _ in 0..c {
                for _ in 0..h {
                    for q in 0..w {
                        let side = if 2 * q < w { 0.5 } else { -0.5 };
                        images.push((side * offset + rng.random_range(-0.2..0.2)) as f32);
                    }
                }
            }
            labels.push(y as u8);
        }
        Dataset::new(shape, 2, images, labels).expect("consistent synthetic data")
    }

    /// The hand rule `separable` is built on.
    pub fn separable_rule(image: &[f32], shape: [usize; 3]) -> usize {
        let w = shape[2];
        let (mut left, mut right) = (0.0f64, 0.0f64);
        for (i, &v) in image.iter().enumerate() {
            if 2 * (i % w) < w {
                left += v as f64;
            } else {
                right += v as f64;
            }
        }
        usize::from(left < right)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let d = synthetic::patterns(12, [2, 3, 4], 10, 0.3, 5, 6);
        let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back, d);
        assert!(back.images().iter().zip(d.images()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_errors_report_offsets() {
        let d = synthetic::patterns(2, [1, 2, 2], 10, 0.1, 1, 1);
        let mut bytes = d.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let bytes = d.to_bytes();
        let short = &bytes[..bytes.len() - 1];
        assert!(matches!(Dataset::from_bytes(short), Err(Error::Format { .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..10]), Err(Error::Format { offset: 10, .. })));
        let mut bad_label = bytes.clone();
        *bad_label.last_mut().unwrap() = 200;
        match Dataset::from_bytes(&bad_label) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_disjoint_with_expected_sizes() {
        let s = SplitConfig { retrain: 0.8, eval: 0.2 }.split(10_000, 3).unwrap();
        assert_eq!((s.retrain.len(), s.eval.len()), (8000, 2000));
        let mut all: Vec<usize> = s.retrain.iter().chain(&s.eval).copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10_000);
        assert!(SplitConfig { retrain: 0.7, eval: 0.4 }.validate().is_err());
    }

    #[test]
    fn separable_set_obeys_its_rule() {
        let d = synthetic::separable(200, [1, 4, 6], 2);
        for i in 0..d.len() {
            assert_eq!(synthetic::separable_rule(d.image(i), d.shape()), d.labels()[i] as usize);
        }
    }
}
