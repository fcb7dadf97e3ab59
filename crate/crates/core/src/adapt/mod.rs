//! Online adaptation of the spectral code: filtered entropy minimization,
//! a diversity term over expert-input alignments, and a SAM + Adam update.

mod optim;

pub use optim::{sam_gradient, Adam};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, AlignmentStats, AlignmentVars, Probes, VisionTransformer};
use crate::spectral::MaskStrategy;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Imse,
    EntminOnly,
    DmOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imse" => Ok(Mode::Imse),
            "entmin_only" => Ok(Mode::EntminOnly),
            "dm_only" => Ok(Mode::DmOnly),
            other => Err(Error::InvalidArgument(format!("unknown adaptation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lambda_dm: f64,
    /// Samples with entropy at or above `factor * ln(classes)` are dropped.
    pub entropy_margin_factor: f64,
    pub learning_rate: f64,
    pub sam_rho: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub mode: Mode,
    pub mask_strategy: MaskStrategy,
    /// Percentage of each spectrum kept trainable by the mask strategy.
    pub mask_r: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lambda_dm: 50.0,
            entropy_margin_factor: 0.4,
            learning_rate: 3e-3,
            sam_rho: 0.05,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            mode: Mode::Imse,
            mask_strategy: MaskStrategy::All,
            mask_r: 100.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: reason.into(),
            })
        };
        if !(self.lambda_dm >= 0.0 && self.lambda_dm.is_finite()) {
            return bad("lambda_dm", "must be finite and non-negative");
        }
        if !(self.entropy_margin_factor > 0.0) {
            return bad("entropy_margin_factor", "must be positive");
        }
        // zero is allowed so that a step can be run as a pure evaluation
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.sam_rho >= 0.0 && self.sam_rho.is_finite()) {
            return bad("sam_rho", "must be finite and non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.mask_r > 0.0 && self.mask_r <= 100.0) {
            return bad("mask_r", "must lie in (0, 100]");
        }
        Ok(())
    }

    /// Weight actually applied to the diversity term.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::EntminOnly => 0.0,
            Mode::Imse | Mode::DmOnly => self.lambda_dm,
        }
    }

    fn uses_entmin(&self) -> bool {
        self.mode != Mode::DmOnly
    }

    pub fn new_optimizer(&self, params: usize) -> Adam {
        Adam::new(params, self.learning_rate, self.adam_betas, self.adam_eps)
    }
}

/// Diagnostics of one adaptation step, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub entmin: f64,
    pub dm: f64,
    pub combined: f64,
    pub kept_samples: usize,
    pub batch_size: usize,
    /// Mean alignment std per probed layer.
    pub layer_std: Vec<(String, f64)>,
    /// Argmax predictions of the pre-update forward.
    pub predictions: Vec<usize>,
    /// No sample survived filtering and the diversity term was off.
    pub noop: bool,
    pub sam_skipped: bool,
    pub grad_norm: f64,
}

impl LossReport {
    /// Mean std over the probed layers whose id starts with `prefix`.
    pub fn mean_std_with_prefix(&self, prefix: &str) -> f64 {
        let sel: Vec<f64> = self
            .layer_std
            .iter()
            .filter(|(l, _)| l.starts_with(prefix))
            .map(|(_, s)| *s)
            .collect();
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    }
}

/// Mean entropy over samples below the reliability threshold.
///
/// Returns the scalar loss var and the kept mask. With nothing kept the
/// loss is an exact zero that still sits on the graph.
pub fn entropy_loss<T: Real>(g: &mut Graph<T>, logits: Var, margin_factor: f64) -> Result<(Var, Vec<bool>)> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("entropy_loss", &s, &[]));
    }
    let (b, c) = (s[0], s[1]);
    let lsm = g.log_softmax(logits);
    let p = g.exp(lsm);
    let plogp = g.mul(p, lsm)?;
    let neg_h = g.sum_axes(plogp, &[1])?;
    let h = g.neg(neg_h);
    let threshold = margin_factor * (c as f64).ln();
    let kept: Vec<bool> = g.data(h).iter().map(|x| x.as_f64() < threshold).collect();
    let k = kept.iter().filter(|x| **x).count();
    let w: Vec<T> = kept
        .iter()
        .map(|&keep| if keep { T::lit(1.0 / k as f64) } else { T::zero() })
        .collect();
    let w = g.constant(Tensor::new([b], w)?);
    let weighted = g.mul(h, w)?;
    Ok((g.sum(weighted), kept))
}

/// `-sum_l mean_i std_i` over the given layers.
pub fn diversity_loss<T: Real>(g: &mut Graph<T>, layers: &[AlignmentVars]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in layers {
        let m = g.mean(l.std);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m)?,
        });
    }
    let total = acc.ok_or_else(|| Error::InvalidArgument("diversity loss over an empty layer set".into()))?;
    Ok(g.neg(total))
}

/// Plain-number entropy loss, for checks and reporting.
pub fn entropy_value(logits: &[f64], classes: usize, margin_factor: f64) -> (f64, Vec<bool>) {
    let threshold = margin_factor * (classes as f64).ln();
    let hs: Vec<f64> = logits
        .chunks(classes)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row.iter()
                .map(|x| {
                    let lp = x - m - z.ln();
                    -lp.exp() * lp
                })
                .sum()
        })
        .collect();
    let kept: Vec<bool> = hs.iter().map(|h| *h < threshold).collect();
    let k = kept.iter().filter(|x| **x).count();
    let loss = if k == 0 {
        0.0
    } else {
        hs.iter().zip(&kept).filter(|(_, k)| **k).map(|(h, _)| h).sum::<f64>() / k as f64
    };
    (loss, kept)
}

pub fn diversity_value(stats: &AlignmentStats) -> f64 {
    -stats
        .layers
        .iter()
        .map(|l| l.std.iter().sum::<f64>() / l.std.len() as f64)
        .sum::<f64>()
}

/// Index of every trainable sigma entry as `(spectral layer, entry)`.
pub fn trainable_entries<T: Real>(model: &VisionTransformer<T>) -> Vec<(usize, usize)> {
    let limit = model.config().trainable_blocks();
    let mut out = Vec::new();
    for (li, (_, b, s)) in model.spectral_layers().into_iter().enumerate() {
        if b < limit && s.sigma().requires_grad() {
            out.extend((0..s.rank()).filter(|&i| s.is_trainable_entry(i)).map(|i| (li, i)));
        }
    }
    out
}

pub fn gather<T: Real>(model: &VisionTransformer<T>, entries: &[(usize, usize)]) -> Vec<f64> {
    let layers = model.spectral_layers();
    entries.iter().map(|&(l, i)| layers[l].2.sigma().data()[i].as_f64()).collect()
}

pub fn scatter<T: Real>(model: &mut VisionTransformer<T>, entries: &[(usize, usize)], values: &[f64]) {
    let mut layers = model.spectral_layers_mut();
    for (&(l, i), &x) in entries.iter().zip(values) {
        layers[l].2.sigma_mut().data_mut()[i] = T::lit(x);
    }
}

/// Loss terms, diagnostics and the flattened gradient at the current code.
pub struct Evaluation<T> {
    pub entmin: f64,
    pub dm: f64,
    pub combined: f64,
    pub kept: Vec<bool>,
    pub layer_std: Vec<(String, f64)>,
    pub logits: Tensor<T>,
    pub grad: Vec<f64>,
}

/// Layers whose alignment statistics are computed: the diversity set
/// plus the last block for diagnostics.
fn probe_layers<T: Real>(model: &VisionTransformer<T>) -> (Vec<String>, usize) {
    let mut layers = model.dm_layers();
    let n_dm = layers.len();
    for l in model.last_block_layers() {
        if !layers.contains(&l) {
            layers.push(l);
        }
    }
    (layers, n_dm)
}

/// Forward and backward of the configured objective.
pub fn evaluate<T: Real>(
    model: &VisionTransformer<T>,
    images: &Tensor<T>,
    cfg: &AdaptConfig,
    entries: &[(usize, usize)],
) -> Result<Evaluation<T>> {
    let (layers, n_dm) = probe_layers(model);
    let probes = Probes {
        alignment: layers,
        embedding: false,
    };
    let mut tr = model.trace(images, &probes, true)?;
    let g = &mut tr.graph;
    let (ent, kept) = entropy_loss(g, tr.logits, cfg.entropy_margin_factor)?;
    let lambda = cfg.effective_lambda();
    let dm_layers = &tr.alignment[..n_dm];
    let dm = if dm_layers.is_empty() {
        None
    } else {
        Some(diversity_loss(g, dm_layers)?)
    };
    if lambda > 0.0 && dm.is_none() {
        return Err(Error::InvalidArgument("diversity term requested but no spectral layer is in its tail".into()));
    }
    let loss = match (cfg.uses_entmin(), lambda > 0.0) {
        // the diversity term is left off the graph entirely at zero weight,
        // so this path is bit-identical to entropy-only adaptation
        (true, false) => ent,
        (true, true) => {
            let w = g.scale(dm.expect("checked above"), T::lit(lambda));
            g.add(ent, w)?
        }
        (false, _) => g.scale(dm.expect("checked above"), T::lit(lambda)),
    };
    let entmin = g.value(ent).item().as_f64();
    let dm_val = dm.map_or(0.0, |d| g.value(d).item().as_f64());
    let combined = g.value(loss).item().as_f64();
    if !combined.is_finite() {
        return Err(Error::NonFinite("adaptation loss"));
    }
    let layer_std = tr
        .alignment
        .iter()
        .map(|a| {
            let s = g.data(a.std);
            (a.layer.clone(), s.iter().map(|x| x.as_f64()).sum::<f64>() / s.len() as f64)
        })
        .collect();
    let logits = g.value(tr.logits).clone();
    let sigmas = tr.sigmas;
    let grads = tr.graph.backward(loss)?;
    let per_layer: Vec<Option<&[T]>> = sigmas.iter().map(|v| grads.get(*v)).collect();
    let grad = entries
        .iter()
        .map(|&(l, i)| per_layer[l].map_or(0.0, |g| g[i].as_f64()))
        .collect();
    Ok(Evaluation {
        entmin,
        dm: dm_val,
        combined,
        kept,
        layer_std,
        logits,
        grad,
    })
}

/// The diagnostics of [`adapt_step`] from a forward pass alone; nothing is
/// updated.
pub fn measure<T: Real>(model: &VisionTransformer<T>, images: &Tensor<T>, cfg: &AdaptConfig) -> Result<LossReport> {
    let (layers, n_dm) = probe_layers(model);
    let probes = Probes {
        alignment: layers,
        embedding: false,
    };
    let out = model.forward_with_probes(images, &probes)?;
    let classes = *out.logits.shape().last().unwrap_or(&1);
    let (entmin, kept) = entropy_value(&out.logits.to_f64_vec(), classes, cfg.entropy_margin_factor);
    let stats = out.alignment.unwrap_or(AlignmentStats { layers: Vec::new() });
    let dm = diversity_value(&AlignmentStats {
        layers: stats.layers[..n_dm].to_vec(),
    });
    let lambda = cfg.effective_lambda();
    let combined = match (cfg.uses_entmin(), lambda > 0.0) {
        (true, false) => entmin,
        (true, true) => entmin + lambda * dm,
        (false, _) => lambda * dm,
    };
    Ok(LossReport {
        entmin,
        dm,
        combined,
        kept_samples: kept.iter().filter(|k| **k).count(),
        batch_size: kept.len(),
        layer_std: stats
            .layers
            .iter()
            .map(|l| (l.layer.clone(), l.std.iter().sum::<f64>() / l.std.len() as f64))
            .collect(),
        predictions: argmax_rows(&out.logits),
        noop: true,
        sam_skipped: true,
        grad_norm: 0.0,
    })
}

/// One SAM + Adam step on the trainable singular values.
///
/// Losses and predictions in the report come from the first forward, at
/// the code as it was before this step.
pub fn adapt_step<T: Real>(
    model: &mut VisionTransformer<T>,
    images: &Tensor<T>,
    cfg: &AdaptConfig,
    opt: &mut Adam,
) -> Result<LossReport> {
    let entries = trainable_entries(model);
    if entries.is_empty() {
        return Err(Error::InvalidArgument("model has no trainable singular values".into()));
    }
    if opt.len() != entries.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer tracks {} values but the model has {} trainable",
            opt.len(),
            entries.len()
        )));
    }
    let first = evaluate(model, images, cfg, &entries)?;
    let kept_samples = first.kept.iter().filter(|k| **k).count();
    let mut report = LossReport {
        entmin: first.entmin,
        dm: first.dm,
        combined: first.combined,
        kept_samples,
        batch_size: first.kept.len(),
        layer_std: first.layer_std,
        predictions: argmax_rows(&first.logits),
        noop: false,
        sam_skipped: false,
        grad_norm: norm(&first.grad),
    };
    if kept_samples == 0 && cfg.effective_lambda() == 0.0 {
        report.noop = true;
        report.sam_skipped = true;
        return Ok(report);
    }

    let mut params = gather(model, &entries);
    let (grad, skipped) = sam_gradient(&params, &first.grad, cfg.sam_rho, |perturbed| {
        scatter(model, &entries, perturbed);
        Ok(evaluate(model, images, cfg, &entries)?.grad)
    })?;
    report.sam_skipped = skipped;
    opt.step(&mut params, &grad);
    // also undoes the perturbation
    scatter(model, &entries, &params);
    Ok(report)
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests;
