//! Synthetic source task: oriented colour gratings.
//!
//! Ten classes, five orientations times two spatial periods. Each image
//! draws its own phase, colours, contrast and small orientation and period
//! jitter, plus a little pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_PER_CLASS: usize = 500;
pub const TEST_PER_CLASS: usize = 100;
pub const PIXELS: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

const ORIENTATIONS: usize = 5;
const PERIODS: [f64; 2] = [12.0, 6.0];
const ANGLE_JITTER_DEG: f64 = 6.0;
const PERIOD_JITTER: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.02;
const MIN_CONTRAST: f64 = 0.35;

/// Images in `[0, 1]`, channel-major, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::shape("dataset", &[pixels.len()], &[labels.len() * PIXELS]));
        }
        if labels.iter().any(|l| *l >= NUM_CLASSES) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        self.labels.iter().for_each(|l| c[*l] += 1);
        c
    }

    /// SHA-256 of labels and pixel bytes, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.labels {
            h.update((*l as u32).to_le_bytes());
        }
        for p in &self.pixels {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Normalized `[B, 3, 32, 32]` batch of the given images.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        to_tensor(indices.iter().map(|&i| self.image(i)))
    }
}

/// Maps `[0, 1]` pixels to the model's `[-1, 1]` range and stacks them.
pub fn to_tensor<'a, T: Real>(images: impl IntoIterator<Item = &'a [f32]>) -> Tensor<T> {
    let mut data = Vec::new();
    for img in images {
        data.extend(img.iter().map(|p| T::lit((f64::from(*p) - 0.5) / 0.5)));
    }
    let b = data.len() / PIXELS;
    Tensor::new([b, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("whole images")
}

fn render(rng: &mut ChaCha8Rng, label: usize, out: &mut Vec<f32>) {
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    let (orient, period) = (label % ORIENTATIONS, PERIODS[label / ORIENTATIONS]);
    let angle = (orient as f64 * 180.0 / ORIENTATIONS as f64 + rng.gen_range(-ANGLE_JITTER_DEG..ANGLE_JITTER_DEG)).to_radians();
    let period = period * (1.0 + rng.gen_range(-PERIOD_JITTER..PERIOD_JITTER));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.6..1.0);
    let (fg, bg) = loop {
        let fg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let contrast = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if contrast >= MIN_CONTRAST {
            break (fg, bg);
        }
    };
    let (dx, dy) = (angle.cos(), angle.sin());
    let k = std::f64::consts::TAU / period;
    let mut wave = [0.0; IMAGE_SIZE * IMAGE_SIZE];
    for (i, w) in wave.iter_mut().enumerate() {
        let (y, x) = ((i / IMAGE_SIZE) as f64, (i % IMAGE_SIZE) as f64);
        *w = 0.5 + 0.5 * amp * (k * (x * dx + y * dy) + phase).sin();
    }
    for ch in 0..CHANNELS {
        for w in wave {
            let v = bg[ch] + w * (fg[ch] - bg[ch]) + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
}

fn make_split(seed: u64, per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * NUM_CLASSES;
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for &l in &labels {
        render(&mut rng, l, &mut pixels);
    }
    Dataset { pixels, labels }
}

/// Train (5,000) and clean test (1,000) splits, class balanced.
pub fn make_source_task(seed: u64) -> (Dataset, Dataset) {
    let train = make_split(seed.wrapping_mul(2).wrapping_add(0x5eed), TRAIN_PER_CLASS);
    let test = make_split(seed.wrapping_mul(2).wrapping_add(0x5eee), TEST_PER_CLASS);
    (train, test)
}
