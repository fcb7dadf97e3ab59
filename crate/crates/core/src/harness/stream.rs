//! Test streams: which images, under which corruption, in which order.

use std::fmt;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use super::corrupt::{CorruptionKind, CorruptionSpec};
use super::data::{to_tensor, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const CTTA_BATCHES: usize = 20;
pub const GRADUAL_BATCHES: usize = 5;
pub const GRADUAL_SEVERITIES: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Tta,
    Ctta,
    Gradual,
    Recurring,
    Dirichlet,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tta => "tta",
            Self::Ctta => "ctta",
            Self::Gradual => "gradual",
            Self::Recurring => "recurring",
            Self::Dirichlet => "dirichlet",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Tta, Self::Ctta, Self::Gradual, Self::Recurring, Self::Dirichlet]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// A run of batches under one corruption; `None` is clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub corruption: Option<CorruptionSpec>,
    pub batches: usize,
}

impl Segment {
    pub fn tag(&self) -> String {
        self.corruption.map_or_else(|| "clean".to_string(), |c| c.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub scenario: Scenario,
    pub segments: Vec<Segment>,
    pub batch_size: usize,
    pub dirichlet_alpha: Option<f64>,
    pub seed: u64,
}

/// One planned batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub segment: usize,
    pub domain: String,
    pub corruption: Option<CorruptionSpec>,
    pub indices: Vec<usize>,
}

impl BatchPlan {
    /// Corrupted, normalized images and their labels.
    pub fn load<T: Real>(&self, data: &Dataset) -> (Tensor<T>, Vec<usize>) {
        let images: Vec<Vec<f32>> = self
            .indices
            .iter()
            .map(|&i| match &self.corruption {
                Some(c) => c.apply(data.image(i), i as u64),
                None => data.image(i).to_vec(),
            })
            .collect();
        let labels = self.indices.iter().map(|&i| data.labels()[i]).collect();
        (to_tensor(images.iter().map(Vec::as_slice)), labels)
    }
}

fn check_common(batch_size: usize, kinds: &[CorruptionKind]) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig {
            field: "batch_size",
            reason: "must be positive".into(),
        });
    }
    if kinds.is_empty() {
        return Err(Error::InvalidConfig {
            field: "stream",
            reason: "needs at least one corruption".into(),
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig {
            field: "dirichlet_alpha",
            reason: format!("must be positive and finite, got {alpha}"),
        });
    }
    Ok(())
}

impl StreamSpec {
    fn corrupted(
        scenario: Scenario,
        items: impl IntoIterator<Item = (CorruptionKind, u8, usize)>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let segments = items
            .into_iter()
            .map(|(k, s, batches)| {
                Ok(Segment {
                    corruption: Some(CorruptionSpec::new(k, s, seed)?),
                    batches,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scenario,
            segments,
            batch_size,
            dirichlet_alpha: None,
            seed,
        })
    }

    /// Each kind on its own at one severity; the model is reset between kinds.
    pub fn tta(kinds: &[CorruptionKind], severity: u8, batches: usize, batch_size: usize, seed: u64) -> Result<Self> {
        check_common(batch_size, kinds)?;
        Self::corrupted(Scenario::Tta, kinds.iter().map(|k| (*k, severity, batches)), batch_size, seed)
    }

    /// Kinds back to back with no boundary signal.
    pub fn ctta(kinds: &[CorruptionKind], severity: u8, batches: usize, batch_size: usize, seed: u64) -> Result<Self> {
        check_common(batch_size, kinds)?;
        Self::corrupted(Scenario::Ctta, kinds.iter().map(|k| (*k, severity, batches)), batch_size, seed)
    }

    /// Each kind ramps 1 to 5 and back to 1.
    pub fn gradual(kinds: &[CorruptionKind], batches_per_step: usize, batch_size: usize, seed: u64) -> Result<Self> {
        check_common(batch_size, kinds)?;
        let items = kinds
            .iter()
            .flat_map(|k| GRADUAL_SEVERITIES.iter().map(move |s| (*k, *s, batches_per_step)));
        Self::corrupted(Scenario::Gradual, items, batch_size, seed)
    }

    /// Kinds in the given order, repeats allowed.
    pub fn recurring(kinds: &[CorruptionKind], severity: u8, batches: usize, batch_size: usize, seed: u64) -> Result<Self> {
        check_common(batch_size, kinds)?;
        Self::corrupted(Scenario::Recurring, kinds.iter().map(|k| (*k, severity, batches)), batch_size, seed)
    }

    /// Like CTTA, with label-imbalanced batches.
    pub fn dirichlet(
        kinds: &[CorruptionKind],
        severity: u8,
        batches: usize,
        batch_size: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        check_common(batch_size, kinds)?;
        check_alpha(alpha)?;
        let mut s = Self::corrupted(Scenario::Dirichlet, kinds.iter().map(|k| (*k, severity, batches)), batch_size, seed)?;
        s.dirichlet_alpha = Some(alpha);
        Ok(s)
    }

    pub fn total_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }

    /// Image indices for every batch. A segment's draw depends on the seed,
    /// its tag and how often that tag occurred before, not on its position,
    /// so reordering distinct domains leaves each domain's batches unchanged.
    pub fn plan(&self, data: &Dataset) -> Result<Vec<BatchPlan>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let mut out = Vec::with_capacity(self.total_batches());
        for (si, seg) in self.segments.iter().enumerate() {
            let tag = seg.tag();
            let occurrence = self.segments[..si].iter().filter(|s| s.tag() == tag).count();
            let seed = segment_seed(self.seed, &tag, occurrence);
            let batches = match self.dirichlet_alpha {
                Some(alpha) => dirichlet_batches(data, alpha, self.batch_size, seg.batches, seed)?,
                None => shuffled_batches(data.len(), self.batch_size, seg.batches, seed),
            };
            out.extend(batches.into_iter().map(|indices| BatchPlan {
                segment: si,
                domain: tag.clone(),
                corruption: seg.corruption,
                indices,
            }));
        }
        Ok(out)
    }
}

fn segment_seed(seed: u64, tag: &str, occurrence: usize) -> u64 {
    // FNV-1a over the tag, folded with the seed and occurrence
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes().chain(occurrence.to_le_bytes()).chain(seed.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Consecutive slices of fresh permutations, reshuffling whenever the data
/// runs out.
fn shuffled_batches(n: usize, batch_size: usize, batches: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = Vec::new();
    (0..batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| {
                    if pool.is_empty() {
                        pool = (0..n).collect();
                        pool.shuffle(&mut rng);
                    }
                    pool.pop().expect("refilled")
                })
                .collect()
        })
        .collect()
}

fn dirichlet_batches(data: &Dataset, alpha: f64, batch_size: usize, batches: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class: Vec<Vec<usize>> = (0..NUM_CLASSES)
        .map(|c| (0..data.len()).filter(|&i| data.labels()[i] == c).collect())
        .collect();
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|c| !by_class[*c].is_empty()).collect();
    let dir = Dirichlet::new_with_size(alpha, present.len().max(2)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    let mut out = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut p: Vec<f64> = dir.sample(&mut rng);
        p.truncate(present.len());
        // very small concentrations can underflow every component
        if !(p.iter().all(|x| x.is_finite()) && p.iter().sum::<f64>() > 0.0) {
            p = vec![0.0; present.len()];
            p[rng.gen_range(0..present.len())] = 1.0;
        }
        let pick = WeightedIndex::new(&p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let batch = (0..batch_size)
            .map(|_| {
                let c = present[pick.sample(&mut rng)];
                if pools[c].is_empty() {
                    pools[c] = by_class[c].clone();
                    pools[c].shuffle(&mut rng);
                }
                pools[c].pop().expect("refilled")
            })
            .collect();
        out.push(batch);
    }
    Ok(out)
}

/// Label-imbalanced batches over a clean test set.
pub fn make_dirichlet_stream(data: &Dataset, alpha: f64, batch_size: usize, seed: u64) -> Result<Vec<BatchPlan>> {
    check_alpha(alpha)?;
    if batch_size == 0 {
        return Err(Error::InvalidConfig {
            field: "batch_size",
            reason: "must be positive".into(),
        });
    }
    let spec = StreamSpec {
        scenario: Scenario::Dirichlet,
        segments: vec![Segment {
            corruption: None,
            batches: data.len() / batch_size,
        }],
        batch_size,
        dirichlet_alpha: Some(alpha),
        seed,
    };
    spec.plan(data)
}
