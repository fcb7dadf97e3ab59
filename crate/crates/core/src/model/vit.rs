use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Target, ViTConfig};
use crate::error::{Error, Result};
use crate::spectral::{CodeHolder, MaskStrategy, SpectralCode, SpectralLayer};
use crate::tensor::{Graph, Real, Tensor, Var, NORM_EPS};

const INIT_STD: f64 = 0.02;

/// Plain `x W^T + b` layer; `weight` is `d_out x d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLinear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Linear<T> {
    Dense(DenseLinear<T>),
    Spectral(SpectralLayer<T>),
}

impl<T: Real> Linear<T> {
    pub fn d_out(&self) -> usize {
        match self {
            Linear::Dense(d) => d.weight.shape()[0],
            Linear::Spectral(s) => s.d_out(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(d) => d.weight.shape()[1],
            Linear::Spectral(s) => s.d_in(),
        }
    }

    pub fn as_spectral(&self) -> Option<&SpectralLayer<T>> {
        match self {
            Linear::Spectral(s) => Some(s),
            Linear::Dense(_) => None,
        }
    }

    pub fn as_spectral_mut(&mut self) -> Option<&mut SpectralLayer<T>> {
        match self {
            Linear::Spectral(s) => Some(s),
            Linear::Dense(_) => None,
        }
    }

    /// Weight-shaped tensor count, as stored.
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Linear::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            Linear::Spectral(s) => vec![("u", s.u()), ("sigma", s.sigma()), ("v", s.v()), ("bias", s.bias())],
        }
    }
}

/// Affine part of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Real> NormParams<T> {
    fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::full([c], T::one()),
            beta: Tensor::zeros([c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: NormParams<T>,
    /// `[q, k, v]`, or a single fused `qkv` projection.
    pub attn_in: Vec<Linear<T>>,
    pub proj: Linear<T>,
    pub norm2: NormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer<T> {
    config: ViTConfig,
    pub patch_embed: DenseLinear<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: NormParams<T>,
    pub head: DenseLinear<T>,
}

/// What to record during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Probes {
    /// Spectral layer ids whose input alignment statistics are wanted.
    pub alignment: Vec<String>,
    /// Keep the patch tokens right after position embedding.
    pub embedding: bool,
}

/// Graph handles for the alignment statistics of one layer.
#[derive(Clone, Debug)]
pub struct AlignmentVars {
    pub layer: String,
    pub rank: usize,
    /// `[r]`
    pub mean: Var,
    /// `[r]`
    pub std: Var,
    /// Layer input, `[N, d_in]`.
    pub input: Var,
    pub tokens: usize,
}

/// Result of [`VisionTransformer::trace`].
pub struct Trace<T> {
    pub graph: Graph<T>,
    /// `[B, num_classes]`
    pub logits: Var,
    /// One var per stored tensor, in [`VisionTransformer::named_tensors`] order.
    pub params: Vec<Var>,
    /// Sigma vars of every spectral layer, in code order.
    pub sigmas: Vec<Var>,
    pub alignment: Vec<AlignmentVars>,
    /// `[B, P, C]`, class token excluded.
    pub embedded: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAlignment {
    pub layer: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentStats {
    pub layers: Vec<LayerAlignment>,
}

pub struct ProbeOutput<T> {
    pub logits: Tensor<T>,
    pub alignment: Option<AlignmentStats>,
    pub embedded: Option<Tensor<T>>,
}

/// Which stored tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainability {
    /// Every tensor (source pretraining).
    All,
    /// Sigmas of spectral layers outside the frozen tail.
    Spectral,
    None,
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape.to_vec(), &data).expect("shape matches")
}

fn dense<T: Real>(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> DenseLinear<T> {
    DenseLinear {
        weight: normal_tensor(rng, &[d_out, d_in], INIT_STD),
        bias: Tensor::zeros([d_out]),
    }
}

/// Patch rows `[B * P, ch * p * p]`, feature order (channel, row, col).
pub fn patchify<T: Real>(images: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape(
            "patchify",
            s,
            &[0, cfg.channels, cfg.image_size, cfg.image_size],
        ));
    }
    let (b, ch, size, p) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size);
    let side = size / p;
    let dim = cfg.patch_dim();
    let x = images.data();
    let mut out = Vec::with_capacity(b * side * side * dim);
    for n in 0..b {
        for py in 0..side {
            for px in 0..side {
                for c in 0..ch {
                    for r in 0..p {
                        let row = ((n * ch + c) * size + py * p + r) * size + px * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([b * side * side, dim], out)
}

struct Binder<'a, T> {
    g: &'a mut Graph<T>,
    params: Vec<Var>,
    sigmas: Vec<Var>,
    track: bool,
}

impl<T: Real> Binder<'_, T> {
    fn bind(&mut self, t: &Tensor<T>) -> Var {
        let v = if self.track {
            self.g.leaf(t)
        } else {
            self.g.constant(t.clone())
        };
        self.params.push(v);
        v
    }

    fn norm(&mut self, p: &NormParams<T>, x: Var) -> Result<Var> {
        let gamma = self.bind(&p.gamma);
        let beta = self.bind(&p.beta);
        let n = self.g.layer_norm(x);
        let y = self.g.mul(n, gamma)?;
        self.g.add(y, beta)
    }

    fn dense(&mut self, d: &DenseLinear<T>, x: Var) -> Result<Var> {
        let w = self.bind(&d.weight);
        let b = self.bind(&d.bias);
        let y = self.g.matmul_nt(x, w)?;
        self.g.add(y, b)
    }

    /// Applies a linear layer, optionally recording alignment statistics.
    fn linear(&mut self, l: &Linear<T>, x: Var, probe: Option<&str>) -> Result<(Var, Option<AlignmentVars>)> {
        match l {
            Linear::Dense(d) => Ok((self.dense(d, x)?, None)),
            Linear::Spectral(s) => {
                let u = self.bind(s.u());
                let sigma = self.bind(s.sigma());
                let v = self.bind(s.v());
                let bias = self.bind(s.bias());
                self.sigmas.push(sigma);
                let b = crate::spectral::SpectralBinding { u, sigma, v, bias };
                let y = SpectralLayer::apply_bound(self.g, &b, x)?;
                let stats = match probe {
                    Some(name) => Some(alignment_stats(self.g, name, x, v)?),
                    None => None,
                };
                Ok((y, stats))
            }
        }
    }
}

/// Mean and population std over tokens of `v_i^T x_n / max(|x_n|, eps)`.
pub fn alignment_stats<T: Real>(g: &mut Graph<T>, layer: &str, x: Var, v: Var) -> Result<AlignmentVars> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 {
        return Err(Error::shape("alignment input", &xs, g.shape(v)));
    }
    let (n, rank) = (xs[0], g.shape(v)[1]);
    let proj = g.matmul(x, v)?;
    let norms = g.l2_norm_last(x, T::lit(NORM_EPS));
    let norms = g.reshape(norms, &[n, 1])?;
    let a = g.div(proj, norms)?;
    let mean = g.mean_axes(a, &[0])?;
    let var = g.var_axes(a, &[0])?;
    let std = g.sqrt(var);
    Ok(AlignmentVars {
        layer: layer.to_string(),
        rank,
        mean,
        std,
        input: x,
        tokens: n,
    })
}

impl<T: Real> VisionTransformer<T> {
    /// Dense model with seeded initialization.
    pub fn build(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.embed_dim;
        let hidden = config.hidden_dim();
        let patch_embed = dense(&mut rng, c, config.patch_dim());
        let cls_token = normal_tensor(&mut rng, &[c], INIT_STD);
        let pos_embed = normal_tensor(&mut rng, &[config.num_tokens(), c], INIT_STD);
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let attn_in = if config.fused_qkv {
                vec![Linear::Dense(dense(&mut rng, 3 * c, c))]
            } else {
                (0..3).map(|_| Linear::Dense(dense(&mut rng, c, c))).collect()
            };
            blocks.push(Block {
                norm1: NormParams::new(c),
                attn_in,
                proj: Linear::Dense(dense(&mut rng, c, c)),
                norm2: NormParams::new(c),
                fc1: Linear::Dense(dense(&mut rng, hidden, c)),
                fc2: Linear::Dense(dense(&mut rng, c, hidden)),
            });
        }
        let head = dense(&mut rng, config.num_classes, c);
        Ok(Self {
            norm: NormParams::new(c),
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    fn attn_names(&self) -> &'static [&'static str] {
        if self.config.fused_qkv {
            &["qkv"]
        } else {
            &["q", "k", "v"]
        }
    }

    /// Every linear layer inside the blocks as `(id, block, layer)`.
    pub fn block_linears(&self) -> Vec<(String, usize, &Linear<T>)> {
        let names = self.attn_names();
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, l) in names.iter().zip(&blk.attn_in) {
                out.push((format!("blocks.{b}.attn.{name}"), b, l));
            }
            out.push((format!("blocks.{b}.attn.proj"), b, &blk.proj));
            out.push((format!("blocks.{b}.mlp.fc1"), b, &blk.fc1));
            out.push((format!("blocks.{b}.mlp.fc2"), b, &blk.fc2));
        }
        out
    }

    fn block_linears_mut(&mut self) -> Vec<(String, usize, &mut Linear<T>)> {
        let names = self.attn_names();
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            for (name, l) in names.iter().zip(blk.attn_in.iter_mut()) {
                out.push((format!("blocks.{b}.attn.{name}"), b, l));
            }
            out.push((format!("blocks.{b}.attn.proj"), b, &mut blk.proj));
            out.push((format!("blocks.{b}.mlp.fc1"), b, &mut blk.fc1));
            out.push((format!("blocks.{b}.mlp.fc2"), b, &mut blk.fc2));
        }
        out
    }

    /// Spectral layers in code order.
    pub fn spectral_layers(&self) -> Vec<(String, usize, &SpectralLayer<T>)> {
        self.block_linears()
            .into_iter()
            .filter_map(|(id, b, l)| l.as_spectral().map(|s| (id, b, s)))
            .collect()
    }

    pub fn spectral_layers_mut(&mut self) -> Vec<(String, usize, &mut SpectralLayer<T>)> {
        self.block_linears_mut()
            .into_iter()
            .filter_map(|(id, b, l)| l.as_spectral_mut().map(|s| (id, b, s)))
            .collect()
    }

    pub fn is_decomposed(&self) -> bool {
        self.block_linears().iter().any(|(_, _, l)| l.as_spectral().is_some())
    }

    fn is_target(&self, id: &str) -> bool {
        let kind = id.rsplit('.').next().unwrap_or("");
        let c = &self.config;
        match kind {
            "q" => c.has_target(Target::AttnQ),
            "k" => c.has_target(Target::AttnK),
            "v" => c.has_target(Target::AttnV),
            "qkv" => [Target::AttnQ, Target::AttnK, Target::AttnV].iter().any(|t| c.has_target(*t)),
            "proj" => c.has_target(Target::AttnProj),
            "fc1" => c.has_target(Target::MlpFc1),
            "fc2" => c.has_target(Target::MlpFc2),
            _ => false,
        }
    }

    /// Replaces every configured target by its SVD factorization and
    /// freezes everything except the trainable sigmas.
    pub fn decompose(&self) -> Result<Self> {
        let mut out = self.clone();
        let targets: Vec<bool> = out.block_linears().iter().map(|(id, _, _)| self.is_target(id)).collect();
        for ((_, _, l), target) in out.block_linears_mut().into_iter().zip(targets) {
            if let (true, Linear::Dense(d)) = (target, &*l) {
                *l = Linear::Spectral(SpectralLayer::decompose(&d.weight, &d.bias)?);
            }
        }
        out.set_trainability(Trainability::Spectral);
        Ok(out)
    }

    /// Spectral layer ids inside the diversity tail.
    pub fn dm_layers(&self) -> Vec<String> {
        self.spectral_layers()
            .into_iter()
            .filter(|(_, b, _)| self.config.is_dm_block(*b))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Spectral layer ids of the last block.
    pub fn last_block_layers(&self) -> Vec<String> {
        let last = self.config.depth - 1;
        self.spectral_layers()
            .into_iter()
            .filter(|(_, b, _)| *b == last)
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Stored tensors in a fixed order, with checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        let names = self.attn_names();
        for (b, blk) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.norm1.gamma"), &blk.norm1.gamma));
            out.push((format!("{p}.norm1.beta"), &blk.norm1.beta));
            fn lin<'a, T: Real>(name: String, l: &'a Linear<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
                for (k, t) in l.tensors() {
                    out.push((format!("{name}.{k}"), t));
                }
            }
            for (n, l) in names.iter().zip(&blk.attn_in) {
                lin(format!("{p}.attn.{n}"), l, &mut out);
            }
            lin(format!("{p}.attn.proj"), &blk.proj, &mut out);
            out.push((format!("{p}.norm2.gamma"), &blk.norm2.gamma));
            out.push((format!("{p}.norm2.beta"), &blk.norm2.beta));
            lin(format!("{p}.mlp.fc1"), &blk.fc1, &mut out);
            lin(format!("{p}.mlp.fc2"), &blk.fc2, &mut out);
        }
        out.push(("norm.gamma".into(), &self.norm.gamma));
        out.push(("norm.beta".into(), &self.norm.beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable access in [`Self::named_tensors`] order. Spectral factors
    /// other than sigma are not exposed.
    pub fn visit_tensors_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor<T>)) {
        let mut i = 0;
        let mut go = |t: &mut Tensor<T>| {
            f(i, t);
            i += 1;
        };
        go(&mut self.patch_embed.weight);
        go(&mut self.patch_embed.bias);
        go(&mut self.cls_token);
        go(&mut self.pos_embed);
        for blk in &mut self.blocks {
            go(&mut blk.norm1.gamma);
            go(&mut blk.norm1.beta);
            let lin = |l: &mut Linear<T>, go: &mut dyn FnMut(&mut Tensor<T>)| match l {
                Linear::Dense(d) => {
                    go(&mut d.weight);
                    go(&mut d.bias);
                }
                Linear::Spectral(s) => {
                    // u, v and bias are never written; keep the index aligned
                    let mut skip = Tensor::zeros([0]);
                    go(&mut skip);
                    go(s.sigma_mut());
                    go(&mut skip);
                    go(&mut skip);
                }
            };
            for l in &mut blk.attn_in {
                lin(l, &mut go);
            }
            lin(&mut blk.proj, &mut go);
            go(&mut blk.norm2.gamma);
            go(&mut blk.norm2.beta);
            lin(&mut blk.fc1, &mut go);
            lin(&mut blk.fc2, &mut go);
        }
        go(&mut self.norm.gamma);
        go(&mut self.norm.beta);
        go(&mut self.head.weight);
        go(&mut self.head.bias);
    }

    pub fn set_trainability(&mut self, mode: Trainability) {
        let spectral_flags: Vec<bool> = self
            .block_linears()
            .iter()
            .filter(|(_, _, l)| l.as_spectral().is_some())
            .map(|(_, b, _)| *b < self.config.trainable_blocks())
            .collect();
        self.visit_tensors_mut(|_, t| t.set_requires_grad(mode == Trainability::All));
        let mut flags = spectral_flags.into_iter();
        for (_, _, s) in self.spectral_layers_mut() {
            let on = flags.next().unwrap_or(false);
            s.sigma_mut().set_requires_grad(match mode {
                Trainability::All => true,
                Trainability::Spectral => on,
                Trainability::None => false,
            });
        }
    }

    /// Applies a top/bottom/all selection to every trainable spectral layer.
    pub fn set_masks(&mut self, strategy: MaskStrategy, percent: f64) -> Result<()> {
        let limit = self.config.trainable_blocks();
        for (_, b, s) in self.spectral_layers_mut() {
            if b < limit {
                s.set_mask(strategy, percent)?;
            } else {
                s.clear_mask();
            }
        }
        Ok(())
    }

    /// Sigma tensors that adaptation may change, with their layer ids.
    pub fn trainable_parameters(&self) -> Vec<(String, &SpectralLayer<T>)> {
        let limit = self.config.trainable_blocks();
        self.spectral_layers()
            .into_iter()
            .filter(|(_, b, _)| *b < limit)
            .map(|(id, _, s)| (id, s))
            .collect()
    }

    /// Number of sigma entries adaptation may change.
    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, s)| s.trainable_count()).sum()
    }

    /// Scalars stored by the model as it is (factors count once each).
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalars of the equivalent dense model.
    pub fn dense_parameter_count(&self) -> usize {
        let spectral_extra: usize = self
            .spectral_layers()
            .iter()
            .map(|(_, _, s)| s.u().numel() + s.sigma().numel() + s.v().numel() - s.d_out() * s.d_in())
            .sum();
        self.parameter_count() - spectral_extra
    }

    fn check_probes(&self, probes: &Probes) -> Result<()> {
        let spectral: Vec<String> = self.spectral_layers().into_iter().map(|(id, _, _)| id).collect();
        for id in &probes.alignment {
            if !spectral.contains(id) {
                return Err(Error::LayerMismatch {
                    layer: id.clone(),
                    reason: "alignment capture requires a spectral layer".into(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass on a fresh graph. With `track = false` nothing is
    /// differentiable and the graph only holds values.
    pub fn trace(&self, images: &Tensor<T>, probes: &Probes, track: bool) -> Result<Trace<T>> {
        self.check_probes(probes)?;
        let cfg = &self.config;
        let batch = images.shape().first().copied().unwrap_or(0);
        let patches = patchify(images, cfg)?;
        let (c, t, p) = (cfg.embed_dim, cfg.num_tokens(), cfg.num_patches());
        let (heads, hd) = (cfg.heads, cfg.head_dim());

        let mut g = Graph::new();
        let mut bx = Binder {
            g: &mut g,
            params: Vec::new(),
            sigmas: Vec::new(),
            track,
        };
        let mut alignment = Vec::new();
        let probe = |id: &str| probes.alignment.iter().any(|a| a == id).then(|| id.to_string());

        let x = bx.g.constant(patches);
        let x = bx.dense(&self.patch_embed, x)?;
        let x = bx.g.reshape(x, &[batch, p, c])?;
        let cls = bx.bind(&self.cls_token);
        let cls = bx.g.reshape(cls, &[1, 1, c])?;
        let cls = bx.g.expand(cls, &[batch, 1, c])?;
        let x = bx.g.concat(&[cls, x], 1)?;
        let pos = bx.bind(&self.pos_embed);
        let x = bx.g.add(x, pos)?;
        let embedded = if probes.embedding {
            let v = bx.g.value(x).data();
            let mut data = Vec::with_capacity(batch * p * c);
            for n in 0..batch {
                data.extend_from_slice(&v[(n * t + 1) * c..(n + 1) * t * c]);
            }
            Some(Tensor::new([batch, p, c], data)?)
        } else {
            None
        };
        let mut h = bx.g.reshape(x, &[batch * t, c])?;

        let names = self.attn_names();
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        for (bi, blk) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{bi}");
            let n1 = bx.norm(&blk.norm1, h)?;
            let mut qkv = Vec::with_capacity(3);
            for (name, l) in names.iter().zip(&blk.attn_in) {
                let id = format!("{pre}.attn.{name}");
                let (y, st) = bx.linear(l, n1, probe(&id).as_deref())?;
                alignment.extend(st);
                qkv.push(y);
            }
            if qkv.len() == 1 {
                let fused = qkv[0];
                qkv = (0..3).map(|i| bx.g.slice(fused, 1, i * c, c)).collect::<Result<_>>()?;
            }
            let split = |v: Var, g: &mut Graph<T>| -> Result<Var> {
                let v = g.reshape(v, &[batch, t, heads, hd])?;
                let v = g.permute(v, &[0, 2, 1, 3])?;
                g.reshape(v, &[batch * heads, t, hd])
            };
            let q = split(qkv[0], bx.g)?;
            let k = split(qkv[1], bx.g)?;
            let v = split(qkv[2], bx.g)?;
            let scores = bx.g.matmul_nt(q, k)?;
            let scores = bx.g.scale(scores, scale);
            let attn = bx.g.softmax(scores);
            let o = bx.g.matmul(attn, v)?;
            let o = bx.g.reshape(o, &[batch, heads, t, hd])?;
            let o = bx.g.permute(o, &[0, 2, 1, 3])?;
            let o = bx.g.reshape(o, &[batch * t, c])?;
            let id = format!("{pre}.attn.proj");
            let (o, st) = bx.linear(&blk.proj, o, probe(&id).as_deref())?;
            alignment.extend(st);
            h = bx.g.add(h, o)?;

            let n2 = bx.norm(&blk.norm2, h)?;
            let id = format!("{pre}.mlp.fc1");
            let (f, st) = bx.linear(&blk.fc1, n2, probe(&id).as_deref())?;
            alignment.extend(st);
            let f = bx.g.gelu(f);
            let id = format!("{pre}.mlp.fc2");
            let (f, st) = bx.linear(&blk.fc2, f, probe(&id).as_deref())?;
            alignment.extend(st);
            h = bx.g.add(h, f)?;
        }

        let h = bx.g.reshape(h, &[batch, t, c])?;
        let cls_out = bx.g.slice(h, 1, 0, 1)?;
        let cls_out = bx.g.reshape(cls_out, &[batch, c])?;
        let z = bx.norm(&self.norm, cls_out)?;
        let logits = bx.dense(&self.head, z)?;
        let Binder { params, sigmas, .. } = bx;

        // keep the caller's requested order
        alignment.sort_by_key(|a: &AlignmentVars| probes.alignment.iter().position(|p| *p == a.layer));
        Ok(Trace {
            graph: g,
            logits,
            params,
            sigmas,
            alignment,
            embedded,
        })
    }

    pub fn forward_with_probes(&self, images: &Tensor<T>, probes: &Probes) -> Result<ProbeOutput<T>> {
        let tr = self.trace(images, probes, false)?;
        let alignment = (!probes.alignment.is_empty()).then(|| AlignmentStats {
            layers: tr
                .alignment
                .iter()
                .map(|a| LayerAlignment {
                    layer: a.layer.clone(),
                    mean: tr.graph.value(a.mean).to_f64_vec(),
                    std: tr.graph.value(a.std).to_f64_vec(),
                    tokens: a.tokens,
                })
                .collect(),
        });
        Ok(ProbeOutput {
            logits: tr.graph.value(tr.logits).clone(),
            alignment,
            embedded: tr.embedded,
        })
    }

    /// Patch tokens after position embedding, `[B, P, C]`, without running
    /// the blocks. Same values as the `embedding` probe.
    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let batch = images.shape().first().copied().unwrap_or(0);
        let (c, p) = (cfg.embed_dim, cfg.num_patches());
        let mut x = patchify(images, cfg)?.matmul(&self.patch_embed.weight.transpose()?)?;
        let (bias, pos) = (self.patch_embed.bias.data(), self.pos_embed.data());
        for (i, row) in x.data_mut().chunks_mut(c).enumerate() {
            let pos = &pos[(i % p + 1) * c..(i % p + 2) * c];
            for ((v, b), q) in row.iter_mut().zip(bias).zip(pos) {
                *v = (*v + *b) + *q;
            }
        }
        x.reshape([batch, p, c])
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_probes(images, &Probes::default())?.logits)
    }

    /// Argmax class per image.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(images)?))
    }

    pub fn cast<U: Real>(&self) -> VisionTransformer<U> {
        let dense = |d: &DenseLinear<T>| DenseLinear {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        let lin = |l: &Linear<T>| match l {
            Linear::Dense(d) => Linear::Dense(dense(d)),
            Linear::Spectral(s) => {
                let mut out = SpectralLayer::from_parts(s.u().cast(), s.sigma().cast(), s.v().cast(), s.bias().cast())
                    .expect("shapes already validated");
                if let Some(m) = s.mask() {
                    out.set_mask_vec(m.to_vec()).expect("same rank");
                }
                Linear::Spectral(out)
            }
        };
        let norm = |n: &NormParams<T>| NormParams {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
        };
        VisionTransformer {
            config: self.config.clone(),
            patch_embed: dense(&self.patch_embed),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: norm(&b.norm1),
                    attn_in: b.attn_in.iter().map(lin).collect(),
                    proj: lin(&b.proj),
                    norm2: norm(&b.norm2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            norm: norm(&self.norm),
            head: dense(&self.head),
        }
    }

    pub(crate) fn from_parts(
        config: ViTConfig,
        patch_embed: DenseLinear<T>,
        cls_token: Tensor<T>,
        pos_embed: Tensor<T>,
        blocks: Vec<Block<T>>,
        norm: NormParams<T>,
        head: DenseLinear<T>,
    ) -> Self {
        Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        }
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl<T: Real> CodeHolder for VisionTransformer<T> {
    fn extract_code(&self) -> SpectralCode {
        let layers = self
            .spectral_layers()
            .into_iter()
            .map(|(id, _, s)| (id, s.sigma().to_f64_vec()))
            .collect();
        SpectralCode::new(layers).expect("model layer ids are unique")
    }

    fn load_code(&mut self, code: &SpectralCode) -> Result<()> {
        self.extract_code().check_compatible(code)?;
        for ((_, _, s), (_, values)) in self.spectral_layers_mut().into_iter().zip(code.layers()) {
            let vals: Vec<T> = values.iter().map(|&x| T::lit(x)).collect();
            s.set_sigma(&vals)?;
        }
        Ok(())
    }
}
