//! Procedural corruptions of `[0, 1]` images.
//!
//! Severity tables, index 0 is severity 1:
//!
//! | kind | parameter | 1 | 2 | 3 | 4 | 5 |
//! |---|---|---|---|---|---|---|
//! | gaussian_noise | pixel std | 0.04 | 0.08 | 0.12 | 0.16 | 0.22 |
//! | shot_noise | photons per unit | 60 | 30 | 15 | 8 | 4 |
//! | impulse_noise | flipped fraction | 0.02 | 0.05 | 0.08 | 0.12 | 0.17 |
//! | defocus_blur_proxy | box width | 2 | 3 | 4 | 5 | 6 |
//! | motion_blur_proxy | streak length | 3 | 5 | 7 | 9 | 11 |
//! | brightness | added level | 0.1 | 0.2 | 0.3 | 0.4 | 0.5 |
//! | contrast | kept contrast | 0.5 | 0.4 | 0.3 | 0.2 | 0.1 |
//! | pixelate | grid cells | 24 | 16 | 12 | 10 | 8 |
//! | jpeg_proxy | DCT step | 0.03 | 0.06 | 0.10 | 0.15 | 0.22 |
//! | fog_proxy | haze weight | 0.4 | 0.7 | 1.0 | 1.4 | 2.0 |

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::data::{CHANNELS, IMAGE_SIZE, PIXELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlurProxy,
    MotionBlurProxy,
    Brightness,
    Contrast,
    Pixelate,
    JpegProxy,
    FogProxy,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlurProxy,
        Self::MotionBlurProxy,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
        Self::JpegProxy,
        Self::FogProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::DefocusBlurProxy => "defocus_blur_proxy",
            Self::MotionBlurProxy => "motion_blur_proxy",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
            Self::JpegProxy => "jpeg_proxy",
            Self::FogProxy => "fog_proxy",
        }
    }

    fn index(self) -> u64 {
        Self::ALL.iter().position(|k| *k == self).expect("listed") as u64
    }

    /// Severity parameter, `severity` in 1..=5.
    pub fn level(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            Self::GaussianNoise => [0.04, 0.08, 0.12, 0.16, 0.22],
            Self::ShotNoise => [60.0, 30.0, 15.0, 8.0, 4.0],
            Self::ImpulseNoise => [0.02, 0.05, 0.08, 0.12, 0.17],
            Self::DefocusBlurProxy => [2.0, 3.0, 4.0, 5.0, 6.0],
            Self::MotionBlurProxy => [3.0, 5.0, 7.0, 9.0, 11.0],
            Self::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            Self::Contrast => [0.5, 0.4, 0.3, 0.2, 0.1],
            Self::Pixelate => [24.0, 16.0, 12.0, 10.0, 8.0],
            Self::JpegProxy => [0.03, 0.06, 0.10, 0.15, 0.22],
            Self::FogProxy => [0.4, 0.7, 1.0, 1.4, 2.0],
        };
        table[usize::from(severity) - 1]
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidConfig {
                field: "severity",
                reason: format!("must lie in 1..=5, got {severity}"),
            });
        }
        Ok(Self { kind, severity, seed })
    }

    /// `kind@severity`, the domain tag used in reports.
    pub fn tag(&self) -> String {
        format!("{}@{}", self.kind, self.severity)
    }

    /// Corrupted copy of one image. `image_id` identifies the image within
    /// its dataset so the noise it receives does not depend on batching.
    pub fn apply(&self, image: &[f32], image_id: u64) -> Vec<f32> {
        corrupt_image(image, self.kind, self.severity, self.seed, image_id)
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Severity 0 returns the input unchanged.
pub(crate) fn corrupt_image(image: &[f32], kind: CorruptionKind, severity: u8, seed: u64, image_id: u64) -> Vec<f32> {
    assert_eq!(image.len(), PIXELS, "one whole image");
    if severity == 0 {
        return image.to_vec();
    }
    let key = mix(mix(mix(seed) ^ kind.index()) ^ u64::from(severity)) ^ mix(image_id.wrapping_add(0x9e37_79b9));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let x: Vec<f64> = image.iter().map(|p| f64::from(*p)).collect();
    let level = kind.level(severity);
    let y = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, level).expect("positive std");
            x.iter().map(|v| v + n.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => x
            .iter()
            .map(|v| {
                let lam = v * level;
                if lam > 0.0 {
                    Poisson::new(lam).expect("positive rate").sample(&mut rng) / level
                } else {
                    0.0
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|v| {
                if rng.gen_bool(level) {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    *v
                }
            })
            .collect(),
        CorruptionKind::DefocusBlurProxy => {
            let k = level as isize;
            let offs: Vec<(isize, isize)> = (0..k)
                .flat_map(|dy| (0..k).map(move |dx| (dy - (k - 1) / 2, dx - (k - 1) / 2)))
                .collect();
            average_offsets(&x, &offs)
        }
        CorruptionKind::MotionBlurProxy => {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let len = level as usize;
            let offs: Vec<(isize, isize)> = (0..len)
                .map(|i| {
                    let t = i as f64 - (len - 1) as f64 / 2.0;
                    ((t * theta.sin()).round() as isize, (t * theta.cos()).round() as isize)
                })
                .collect();
            average_offsets(&x, &offs)
        }
        CorruptionKind::Brightness => x.iter().map(|v| v + level).collect(),
        CorruptionKind::Contrast => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - mean) * level + mean).collect()
        }
        CorruptionKind::Pixelate => pixelate(&x, level as usize),
        CorruptionKind::JpegProxy => block_quantize(&x, level),
        CorruptionKind::FogProxy => fog(&x, level, &mut rng),
    };
    y.into_iter().map(|v: f64| v.clamp(0.0, 1.0) as f32).collect()
}

fn at(x: &[f64], ch: usize, r: isize, c: isize) -> f64 {
    let n = IMAGE_SIZE as isize;
    let (r, c) = (r.clamp(0, n - 1) as usize, c.clamp(0, n - 1) as usize);
    x[(ch * IMAGE_SIZE + r) * IMAGE_SIZE + c]
}

/// Mean over `(dy, dx)` offsets with edge replication.
fn average_offsets(x: &[f64], offs: &[(isize, isize)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..CHANNELS {
        for r in 0..IMAGE_SIZE as isize {
            for c in 0..IMAGE_SIZE as isize {
                let s: f64 = offs.iter().map(|(dy, dx)| at(x, ch, r + dy, c + dx)).sum();
                out.push(s / offs.len() as f64);
            }
        }
    }
    out
}

fn pixelate(x: &[f64], cells: usize) -> Vec<f64> {
    let bounds: Vec<usize> = (0..=cells).map(|i| i * IMAGE_SIZE / cells).collect();
    let mut out = vec![0.0; x.len()];
    for ch in 0..CHANNELS {
        let plane = ch * IMAGE_SIZE * IMAGE_SIZE;
        for i in 0..cells {
            for j in 0..cells {
                let (rows, cols) = (bounds[i]..bounds[i + 1], bounds[j]..bounds[j + 1]);
                let idx: Vec<usize> = rows
                    .flat_map(|r| cols.clone().map(move |c| plane + r * IMAGE_SIZE + c))
                    .collect();
                let mean = idx.iter().map(|&k| x[k]).sum::<f64>() / idx.len() as f64;
                idx.iter().for_each(|&k| out[k] = mean);
            }
        }
    }
    out
}

const BLOCK: usize = 8;

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut b = [[0.0; BLOCK]; BLOCK];
    for (k, row) in b.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * BLOCK) as f64).cos();
        }
    }
    b
}

/// Orthonormal 8x8 DCT per block, coefficients rounded to a step that grows
/// with frequency, then inverted.
fn block_quantize(x: &[f64], step: f64) -> Vec<f64> {
    let b = dct_basis();
    let mut out = vec![0.0; x.len()];
    for ch in 0..CHANNELS {
        let plane = ch * IMAGE_SIZE * IMAGE_SIZE;
        for by in (0..IMAGE_SIZE).step_by(BLOCK) {
            for bx in (0..IMAGE_SIZE).step_by(BLOCK) {
                let px = |r: usize, c: usize| plane + (by + r) * IMAGE_SIZE + bx + c;
                let mut coef = [[0.0; BLOCK]; BLOCK];
                for (u, row) in coef.iter_mut().enumerate() {
                    for (v, cv) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for r in 0..BLOCK {
                            for c in 0..BLOCK {
                                s += b[u][r] * b[v][c] * x[px(r, c)];
                            }
                        }
                        let q = step * (1 + u + v) as f64;
                        *cv = (s / q).round() * q;
                    }
                }
                for r in 0..BLOCK {
                    for c in 0..BLOCK {
                        let mut s = 0.0;
                        for (u, row) in coef.iter().enumerate() {
                            for (v, cv) in row.iter().enumerate() {
                                s += b[u][r] * b[v][c] * cv;
                            }
                        }
                        out[px(r, c)] = s;
                    }
                }
            }
        }
    }
    out
}

/// Blend toward a smooth grey haze made of a few long-wavelength waves.
fn fog(x: &[f64], weight: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let period = rng.gen_range(16.0..64.0);
            (angle.cos(), angle.sin(), std::f64::consts::TAU / period, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut haze: Vec<f64> = (0..n)
        .map(|i| {
            let (r, c) = ((i / IMAGE_SIZE) as f64, (i % IMAGE_SIZE) as f64);
            waves.iter().map(|(dx, dy, k, ph)| (k * (c * dx + r * dy) + ph).sin()).sum()
        })
        .collect();
    let (lo, hi) = haze.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| (a.min(h), b.max(h)));
    haze.iter_mut().for_each(|h| *h = 0.5 + 0.5 * (*h - lo) / (hi - lo).max(1e-12));
    x.iter()
        .enumerate()
        .map(|(i, v)| (v + weight * haze[i % n]) / (1.0 + weight))
        .collect()
}
