//! Domain descriptors, shift detection and spectral code retrieval.

mod persist;

pub use persist::BANK_MAGIC;

use crate::error::{Error, Result};
use crate::spectral::{CodeHolder, SpectralCode};
use crate::tensor::{Real, Tensor};

/// Variances are floored at this value inside the divergence.
pub const VAR_FLOOR: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.8;
pub const TAU_CTTA: f64 = 0.05;
pub const TAU_GRADUAL: f64 = 0.02;

/// Channel-wise Gaussian summary of embedded patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDescriptor {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DomainDescriptor {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::shape("descriptor", &[mean.len()], &[var.len()]));
        }
        if var.iter().any(|v| !(*v >= 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("descriptor needs finite means and non-negative variances".into()));
        }
        Ok(Self { mean, var })
    }

    /// Mean and population variance over all leading axes of
    /// `[B, T, C]` (or any `[.., C]`) tokens.
    pub fn from_tokens<T: Real>(tokens: &Tensor<T>) -> Result<Self> {
        let s = tokens.shape();
        let c = *s.last().ok_or_else(|| Error::shape("descriptor tokens", s, &[]))?;
        if c == 0 {
            return Err(Error::shape("descriptor tokens", s, &[]));
        }
        let n = tokens.numel() / c;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("descriptor needs at least 2 token vectors, got {n}")));
        }
        let mut mean = vec![0.0; c];
        for row in tokens.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in tokens.data().chunks(c) {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(row) {
                let d = x.as_f64() - m;
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        Self::new(mean, var)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// `alpha * self + (1 - alpha) * current`, elementwise.
    pub fn blend(&self, current: &DomainDescriptor, alpha: f64) -> Result<Self> {
        check_channels(self, current)?;
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        Ok(Self {
            mean: mix(&self.mean, &current.mean),
            var: mix(&self.var, &current.var),
        })
    }
}

fn check_channels(a: &DomainDescriptor, b: &DomainDescriptor) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::shape("descriptor channels", &[a.channels()], &[b.channels()]));
    }
    Ok(())
}

fn kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    0.5 * (s1 / s2 + (m2 - m1) * (m2 - m1) / s2 - 1.0 + (s2 / s1).ln())
}

/// Symmetric KL between channel-independent Gaussians, averaged over channels.
pub fn distance(a: &DomainDescriptor, b: &DomainDescriptor) -> Result<f64> {
    check_channels(a, b)?;
    let mut total = 0.0;
    for i in 0..a.channels() {
        let (m1, s1) = (a.mean[i], a.var[i].max(VAR_FLOOR));
        let (m2, s2) = (b.mean[i], b.var[i].max(VAR_FLOOR));
        total += kl(m1, s1, m2, s2) + kl(m2, s2, m1, s1);
    }
    Ok(total / a.channels() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub descriptor: DomainDescriptor,
    pub code: SpectralCode,
    pub label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observation {
    NoShift,
    Shift { stored: usize, retrieved: usize },
}

/// Append-only store of `(descriptor, code)` pairs plus the running
/// descriptor of the current domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBank {
    entries: Vec<BankEntry>,
    ema: Option<DomainDescriptor>,
    alpha: f64,
    tau: f64,
    steps: u64,
}

impl DomainBank {
    /// A bank holding only the source entry.
    pub fn new(source: DomainDescriptor, source_code: SpectralCode, alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig {
                field: "alpha",
                reason: "must lie in [0, 1]".into(),
            });
        }
        if !(tau >= 0.0) {
            return Err(Error::InvalidConfig {
                field: "tau",
                reason: "must be non-negative".into(),
            });
        }
        Ok(Self {
            entries: vec![BankEntry {
                descriptor: source,
                code: source_code,
                label: "source".into(),
            }],
            ema: None,
            alpha,
            tau,
            steps: 0,
        })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ema(&self) -> Option<&DomainDescriptor> {
        self.ema.as_ref()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Folds `current` into the running descriptor; the first call copies it.
    pub fn ema_update(&mut self, current: &DomainDescriptor) -> Result<&DomainDescriptor> {
        let next = match &self.ema {
            None => current.clone(),
            Some(e) => e.blend(current, self.alpha)?,
        };
        self.steps += 1;
        Ok(self.ema.insert(next))
    }

    /// Index of the entry closest to `d`; ties go to the lowest index.
    pub fn nearest(&self, d: &DomainDescriptor) -> Result<(usize, f64)> {
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.iter().enumerate() {
            let dist = distance(d, &e.descriptor)?;
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Ok(best)
    }

    /// Shift detection against the running descriptor. On a shift the
    /// finished domain is stored, the nearest entry's code is loaded into
    /// `model` and the running descriptor restarts from `current`.
    pub fn observe<H: CodeHolder + ?Sized>(&mut self, current: &DomainDescriptor, model: &mut H) -> Result<Observation> {
        self.observe_labeled(current, model, None)
    }

    pub fn observe_labeled<H: CodeHolder + ?Sized>(
        &mut self,
        current: &DomainDescriptor,
        model: &mut H,
        label: Option<&str>,
    ) -> Result<Observation> {
        let Some(ema) = &self.ema else {
            self.ema_update(current)?;
            return Ok(Observation::NoShift);
        };
        if distance(current, ema)? <= self.tau {
            self.ema_update(current)?;
            return Ok(Observation::NoShift);
        }
        let stored = self.entries.len();
        let label = label.map_or_else(|| format!("domain{stored}"), |l| l.replace(['\n', '\r'], " "));
        self.entries.push(BankEntry {
            descriptor: ema.clone(),
            code: model.extract_code(),
            label,
        });
        let (retrieved, _) = self.nearest(current)?;
        model.load_code(&self.entries[retrieved].code)?;
        self.ema = Some(current.clone());
        self.steps += 1;
        Ok(Observation::Shift { stored, retrieved })
    }

    /// Pairwise entry distances.
    pub fn distance_matrix(&self) -> Result<Vec<Vec<f64>>> {
        self.entries
            .iter()
            .map(|a| self.entries.iter().map(|b| distance(&a.descriptor, &b.descriptor)).collect())
            .collect()
    }

    pub fn distance_matrix_csv(&self) -> Result<String> {
        let m = self.distance_matrix()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["entry".to_string()];
        header.extend(self.entries.iter().map(|e| e.label.clone()));
        w.write_record(&header)?;
        for (e, row) in self.entries.iter().zip(m) {
            let mut rec = vec![e.label.clone()];
            rec.extend(row.iter().map(|d| format!("{d:.6}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}
