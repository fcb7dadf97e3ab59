//! Acceptance run: one PASS or FAIL line per criterion.
//!
//! The desk-scale experiments share one pretrained source model, cached
//! under the cargo target directory and keyed by its configuration.
//! `IMSE_PRECISION` selects the precision of those experiments (default
//! `f32`); the numerical checks always run in `f64`.
//! `IMSE_ACCEPTANCE=1,7,11` runs a subset.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use imse::adapt::{entropy_loss, evaluate, gather, scatter, trainable_entries, AdaptConfig};
use imse::bank::{distance, DomainBank, DomainDescriptor, Observation, DEFAULT_ALPHA};
use imse::harness::{
    accuracy, make_source_task, pretrain, read_records, report, run_scenario, source_descriptor, summarize,
    to_tensor, BankConfig, CorruptionKind, CorruptionSpec, Dataset, Method, MetricsRecord, Precision, PretrainConfig,
    RunOutput, StreamSpec,
};
use imse::model::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, Probes, Trainability, ViTConfig, VisionTransformer,
};
use imse::spectral::svd::jacobi_svd;
use imse::spectral::{masked_count, CodeHolder, MaskStrategy, SpectralCode};
use imse::tensor::{Graph, Real, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [0, 1, 2];
/// Batches per corruption in the severity-5 TTA suite.
const TTA_BATCHES: usize = 15;
const CTTA_BATCHES: usize = 20;
const COLLAPSE_STEPS: usize = 100;
const BATCH: usize = 64;

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, title: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, title, pass, detail }
}

struct Ctx {
    train: Dataset,
    test: Dataset,
    /// Dense source model as trained.
    dense: VisionTransformer<f64>,
}

fn cache_path(cfg: &ViTConfig, pcfg: &PretrainConfig, data: &Dataset) -> PathBuf {
    let mut h = Sha256::new();
    h.update(toml::to_string(cfg).unwrap());
    h.update(toml::to_string(pcfg).unwrap());
    h.update(data.hash());
    let key: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-source-{key}.ckpt"))
}

/// Pretrains the source model once and reuses the checkpoint afterwards.
fn source_model(train: &Dataset) -> VisionTransformer<f64> {
    let cfg = ViTConfig::default();
    let pcfg = PretrainConfig::default();
    let path = cache_path(&cfg, &pcfg, train);
    if let Ok(m) = load_checkpoint::<f64>(&path) {
        println!("setup: cached source model {}", path.display());
        return m;
    }
    let start = Instant::now();
    // trained in single precision; checkpoints store f64
    let (m, report) = pretrain::<f32>(&cfg, train, &pcfg).expect("pretraining");
    println!(
        "setup: pretrained the source model in {:.0} s, final epoch loss {:.4}",
        start.elapsed().as_secs_f64(),
        report.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    save_checkpoint(&m, &path).expect("cache checkpoint");
    load_checkpoint(&path).expect("reload")
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn contrast(img: &[f32], id: usize) -> Vec<f32> {
    CorruptionSpec::new(CorruptionKind::Contrast, 5, 0).unwrap().apply(img, id as u64)
}

// 1
fn gradient_fidelity(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let mut m = ctx.dense.decompose().unwrap();
    m.set_trainability(Trainability::Spectral);
    let cfg = AdaptConfig::default();
    // clean images are confident and kept, low-contrast ones mostly filtered
    let imgs: Vec<Vec<f32>> = (0..4)
        .map(|i| if i < 2 { ctx.test.image(i).to_vec() } else { contrast(ctx.test.image(i), i) })
        .collect();
    let x: Tensor<f64> = to_tensor(imgs.iter().map(Vec::as_slice));
    let entries = trainable_entries(&m);
    let ev = evaluate(&m, &x, &cfg, &entries).unwrap();
    let kept = ev.kept.iter().filter(|k| **k).count();
    let base = gather(&m, &entries);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut flips = 0;
    for (j, &a) in ev.grad.iter().enumerate() {
        let mut p = base.clone();
        p[j] += h;
        scatter(&mut m, &entries, &p);
        let up = evaluate(&m, &x, &cfg, &entries).unwrap();
        p[j] -= 2.0 * h;
        scatter(&mut m, &entries, &p);
        let down = evaluate(&m, &x, &cfg, &entries).unwrap();
        flips += usize::from(up.kept != ev.kept || down.kept != ev.kept);
        let n = (up.combined - down.combined) / (2.0 * h);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-5));
    }
    let t = secs(start);
    outcome(
        "1",
        "gradient fidelity",
        worst <= 1e-4 && flips == 0 && kept > 0 && t < 120.0,
        format!(
            "{} sigma entries, {kept}/4 samples kept, worst relative error {worst:.2e} (limit 1e-4), {t:.0} s (limit 120 s)",
            entries.len()
        ),
    )
}

fn eigen_oracle(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let w = DMatrix::from_row_slice(m, n, a);
    let gram = if m >= n { w.transpose() * &w } else { &w * w.transpose() };
    let mut s: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn orthonormality_residual(q: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..cols {
        for r in 0..cols {
            let d: f64 = (0..rows).map(|i| q[i * cols + p] * q[i * cols + r]).sum();
            acc += (d - f64::from(u8::from(p == r))).powi(2);
        }
    }
    acc.sqrt()
}

// 2
fn svd_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut ortho, mut recon, mut sv, mut sv_elem) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..200 {
        // every fifth case is square at the largest size
        let (m, n) = if case % 5 == 0 { (64, 64) } else { (rng.gen_range(1..=64), rng.gen_range(1..=64)) };
        let a: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let svd = jacobi_svd(&a, m, n).unwrap();
        let r = m.min(n);
        ortho = ortho.max(orthonormality_residual(&svd.u, m, r)).max(orthonormality_residual(&svd.v, n, r));
        let mut err = 0.0;
        for i in 0..m {
            for j in 0..n {
                let w: f64 = (0..r).map(|k| svd.u[i * r + k] * svd.s[k] * svd.v[j * r + k]).sum();
                err += (w - a[i * n + j]).powi(2);
            }
        }
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        recon = recon.max(err.sqrt() / norm);
        // squaring in the Gram matrix costs the oracle eps * s_max absolute
        // accuracy, so errors are scaled by the largest singular value
        let oracle = eigen_oracle(&a, m, n);
        for (s, o) in svd.s.iter().zip(&oracle) {
            sv = sv.max((s - o).abs() / oracle[0]);
            sv_elem = sv_elem.max((s - o).abs() / o.max(f64::MIN_POSITIVE));
        }
    }
    let t = secs(start);
    outcome(
        "2",
        "SVD correctness",
        ortho <= 1e-10 && recon <= 1e-10 && sv <= 1e-9 && t < 30.0,
        format!(
            "200 matrices up to 64x64: orthonormality {ortho:.1e}, reconstruction {recon:.1e}, singular values vs eigen oracle {sv:.1e} relative to s_max ({sv_elem:.1e} elementwise), {t:.1} s"
        ),
    )
}

// 3
fn alignment_oracle(ctx: &Ctx) -> Outcome {
    let m = ctx.dense.decompose().unwrap();
    let layers: Vec<String> = m.spectral_layers().into_iter().map(|(id, _, _)| id).collect();
    let probes = Probes {
        alignment: layers.clone(),
        embedding: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for batch in 0..50 {
        let b = 1 + batch % 3;
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..ctx.test.len())).collect();
        let x: Tensor<f64> = ctx.test.batch(&idx);
        let stats = m.forward_with_probes(&x, &probes).unwrap().alignment.unwrap();
        let tr = m.trace(&x, &probes, false).unwrap();
        for (la, vars) in stats.layers.iter().zip(&tr.alignment) {
            let input = tr.graph.value(vars.input);
            let (n, d) = (input.shape()[0], input.shape()[1]);
            let layer = m.spectral_layers().into_iter().find(|(id, _, _)| *id == la.layer).unwrap().2;
            let v = layer.v();
            let r = v.shape()[1];
            for i in 0..r {
                let mut a = Vec::with_capacity(n);
                for t in 0..n {
                    let row = &input.data()[t * d..(t + 1) * d];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
                    let dot: f64 = (0..d).map(|k| row[k] * v.data()[k * r + i]).sum();
                    a.push(dot / norm);
                }
                let mean = a.iter().sum::<f64>() / n as f64;
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                max_abs = a.iter().fold(max_abs, |acc, x| acc.max(x.abs()));
                worst = worst.max((mean - la.mean[i]).abs()).max((std - la.std[i]).abs());
                checked += 1;
            }
        }
    }
    outcome(
        "3",
        "alignment statistics oracle",
        worst <= 1e-10 && max_abs <= 1.0,
        format!("50 batches, {checked} expert statistics, worst deviation {worst:.1e} (limit 1e-10), max |a| {max_abs:.6}"),
    )
}

// 4
fn entropy_filtering() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for c in [2usize, 10, 100] {
        // rows: uniform, confident, high-entropy but not uniform, uniform again
        let b = 4;
        let mut logits = vec![0.0f64; b * c];
        logits[c] = 12.0;
        for k in 0..c {
            logits[2 * c + k] = 0.05 * k as f64;
        }
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::new([b, c], logits).unwrap().with_requires_grad(true));
        let (loss, kept) = entropy_loss(&mut g, x, 0.4).unwrap();
        let grads = g.backward(loss).unwrap().get_or_zeros(x);
        let filtered_zero = (0..b).filter(|r| !kept[*r]).all(|r| grads[r * c..(r + 1) * c].iter().all(|v| *v == 0.0));
        let case = !kept[0] && !kept[3] && kept[1] && !kept[2] && filtered_zero;
        ok &= case;
        notes.push(format!("C={c}: kept {kept:?}"));
    }
    outcome(
        "4",
        "entropy filtering",
        ok,
        format!("uniform rows filtered, filtered rows have exactly zero gradient; {}", notes.join(", ")),
    )
}

fn random_descriptor(rng: &mut ChaCha8Rng, c: usize) -> DomainDescriptor {
    DomainDescriptor::new(
        (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        (0..c).map(|_| rng.gen_range(0.01..3.0)).collect(),
    )
    .unwrap()
}

// 5
fn symmetric_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut self_max, mut asym) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let c = rng.gen_range(1..=64);
        let a = random_descriptor(&mut rng, c);
        let b = random_descriptor(&mut rng, c);
        self_max = self_max.max(distance(&a, &a).unwrap().abs());
        asym = asym.max((distance(&a, &b).unwrap() - distance(&b, &a).unwrap()).abs());
    }
    let d = |m1: f64, v1: f64, m2: f64, v2: f64| {
        distance(&DomainDescriptor::new(vec![m1], vec![v1]).unwrap(), &DomainDescriptor::new(vec![m2], vec![v2]).unwrap())
            .unwrap()
    };
    let means = d(0.0, 1.0, 1.0, 1.0);
    let vars = d(0.0, 1.0, 0.0, 2.0);
    // 1/2 [(1/2 + ln 2 - 1) + (2 - ln 2 - 1)] = 1/4
    let vars_expected = 0.5 * ((0.5 + 2f64.ln() - 1.0) + (2.0 + 0.5f64.ln() - 1.0));
    outcome(
        "5",
        "symmetric KL",
        self_max == 0.0 && asym == 0.0 && means == 1.0 && vars == vars_expected && (vars - 0.25).abs() < 1e-15,
        format!(
            "1000 pairs: max D(a,a) {self_max:e}, max |D(a,b) - D(b,a)| {asym:e}; means 0 vs 1: {means}; variances 1 vs 2: {vars}"
        ),
    )
}

/// Holds one code; stands in for a model during the scripted stream.
struct Holder(SpectralCode);

impl CodeHolder for Holder {
    fn extract_code(&self) -> SpectralCode {
        self.0.clone()
    }

    fn load_code(&mut self, code: &SpectralCode) -> imse::Result<()> {
        self.0.check_compatible(code)?;
        self.0 = code.clone();
        Ok(())
    }
}

fn marker(v: f64) -> SpectralCode {
    SpectralCode::new(vec![("layer".into(), vec![v; 4])]).unwrap()
}

fn domain_tokens(rng: &mut ChaCha8Rng, domain: usize, channels: usize) -> Tensor<f64> {
    let (b, p) = (4, 16);
    let data = (0..b * p * channels)
        .map(|i| {
            let ch = i % channels;
            let mean = 3.0 * domain as f64 * if ch % 2 == 0 { 1.0 } else { -1.0 };
            let std = 1.0 + 0.5 * domain as f64;
            Normal::new(mean, std).unwrap().sample(rng)
        })
        .collect();
    Tensor::new([b, p, channels], data).unwrap()
}

// 6
fn shift_detection() -> Outcome {
    let start = Instant::now();
    let channels = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let script = [0usize, 1, 2, 0, 1];
    let per = 12;
    let descs: Vec<Vec<DomainDescriptor>> = script
        .iter()
        .map(|&d| (0..per).map(|_| DomainDescriptor::from_tokens(&domain_tokens(&mut rng, d, channels)).unwrap()).collect())
        .collect();
    // calibrate on the stream itself: within against the first batch of
    // each segment, between over all cross-domain pairs
    let (mut within, mut between) = (0.0f64, f64::INFINITY);
    for (si, seg) in descs.iter().enumerate() {
        for d in seg {
            within = within.max(distance(d, &seg[0]).unwrap());
        }
        for (sj, other) in descs.iter().enumerate() {
            if script[si] != script[sj] {
                for (a, b) in seg.iter().zip(other) {
                    between = between.min(distance(a, b).unwrap());
                }
            }
        }
    }
    let tau = (within * between).sqrt();
    // the source is a fourth domain so it never competes with stored entries
    let source = DomainDescriptor::from_tokens(&domain_tokens(&mut rng, 3, channels)).unwrap();
    let mut bank = DomainBank::new(source, marker(-1.0), DEFAULT_ALPHA, tau).unwrap();
    let mut holder = Holder(marker(-1.0));
    let mut stored_for: Vec<Option<usize>> = vec![None; 3];
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut retrieval_ok = true;
    let mut recurrences = 0;
    let mut seen = [false; 3];
    for (si, seg) in descs.iter().enumerate() {
        for (bi, d) in seg.iter().enumerate() {
            let boundary = si > 0 && bi == 0;
            match bank.observe(d, &mut holder).unwrap() {
                Observation::Shift { stored, retrieved } => {
                    if boundary {
                        tp += 1;
                        let prev = script[si - 1];
                        stored_for[prev].get_or_insert(stored);
                        if seen[script[si]] {
                            recurrences += 1;
                            retrieval_ok &= Some(retrieved) == stored_for[script[si]];
                            retrieval_ok &= holder.0 == bank.entries()[retrieved].code;
                        }
                    } else {
                        fp += 1;
                    }
                }
                Observation::NoShift => fn_ += usize::from(boundary),
            }
            // adaptation inside a segment leaves a domain-specific code
            holder.0 = marker(script[si] as f64);
        }
        seen[script[si]] = true;
    }
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    let t = secs(start);
    outcome(
        "6",
        "shift detection and retrieval",
        between >= 10.0 * within && f1 == 1.0 && retrieval_ok && recurrences == 2 && t < 60.0,
        format!(
            "within {within:.4}, between {between:.3} ({:.0}x), tau {tau:.4}: F1 {f1:.2} (tp {tp}, fp {fp}, fn {fn_}), {recurrences} recurrences retrieved their own entries: {retrieval_ok}, bank size {}",
            between / within,
            bank.len()
        ),
    )
}

struct Desk<T: Real> {
    model: VisionTransformer<T>,
    desc: DomainDescriptor,
}

impl<T: Real> Desk<T> {
    fn new(ctx: &Ctx) -> Self {
        let model = ctx.dense.decompose().unwrap().cast::<T>();
        let desc = source_descriptor(&model, &ctx.train, BankConfig::default().source_images).unwrap();
        Self { model, desc }
    }

    fn run(&self, ctx: &Ctx, stream: &StreamSpec, method: Method, adapt: &AdaptConfig) -> RunOutput<T> {
        run_scenario(&self.model, &ctx.test, &self.desc, stream, method, adapt, &BankConfig::default()).unwrap()
    }

    /// Mean over domains of per-domain accuracy.
    fn mean_accuracy(&self, ctx: &Ctx, stream: &StreamSpec, method: Method, adapt: &AdaptConfig) -> (f64, RunOutput<T>) {
        let out = self.run(ctx, stream, method, adapt);
        (summarize(&out.records)[0].overall(), out)
    }
}

fn tta_suite(seed: u64) -> StreamSpec {
    StreamSpec::tta(&CorruptionKind::ALL, 5, TTA_BATCHES, BATCH, seed).unwrap()
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// 7
fn tta_improvement<T: Real>(ctx: &Ctx, desk: &Desk<T>) -> Outcome {
    let start = Instant::now();
    let adapt = AdaptConfig::default();
    let methods = [Method::Source, Method::EntminOnly, Method::Imse];
    let mut acc = [0.0; 3];
    for seed in SEEDS {
        for (k, m) in methods.iter().enumerate() {
            acc[k] += desk.mean_accuracy(ctx, &tta_suite(seed), *m, &adapt).0 / SEEDS.len() as f64;
        }
    }
    let [source, ent, imse] = acc;
    let t = secs(start);
    outcome(
        "7",
        "desk-scale TTA improvement",
        imse - ent >= 0.01 && ent - source >= 0.01 && t < 1200.0,
        format!(
            "severity 5, 10 kinds x {TTA_BATCHES} batches, 3 seeds: source {}, entmin_only {}, imse {}; gaps imse-entmin {:+.2} pp, entmin-source {:+.2} pp (need >= 1 pp each); {t:.0} s (limit 1200 s)",
            pct(source),
            pct(ent),
            pct(imse),
            100.0 * (imse - ent),
            100.0 * (ent - source)
        ),
    )
}

// 8
fn ctta_ordering<T: Real>(ctx: &Ctx, desk: &Desk<T>) -> Outcome {
    let adapt = AdaptConfig::default();
    let methods = [Method::Source, Method::EntminOnly, Method::Imse, Method::ImseRetrieval];
    let mut acc = [0.0; 4];
    let (mut shifts, mut bank) = (0usize, 0usize);
    for seed in SEEDS {
        let stream = StreamSpec::ctta(&CorruptionKind::ALL, 5, CTTA_BATCHES, BATCH, seed).unwrap();
        for (k, m) in methods.iter().enumerate() {
            let (a, out) = desk.mean_accuracy(ctx, &stream, *m, &adapt);
            acc[k] += a / SEEDS.len() as f64;
            if *m == Method::ImseRetrieval {
                shifts += out.records.iter().filter(|r| r.shift_stored.is_some()).count();
                bank += out.bank.map_or(0, |b| b.len());
            }
        }
    }
    let [source, ent, imse, ret] = acc;
    outcome(
        "8",
        "CTTA component ordering",
        ret >= imse && imse >= ent,
        format!(
            "10 kinds x {CTTA_BATCHES} batches, 3 seeds: imse_retrieval {} >= imse {} >= entmin_only {} (source {}); retrieval detected {:.1} shifts per run for 9 boundaries, final bank size {:.1}",
            pct(ret),
            pct(imse),
            pct(ent),
            pct(source),
            shifts as f64 / 3.0,
            bank as f64 / 3.0
        ),
    )
}

// 9
fn diversity_collapse<T: Real>(ctx: &Ctx, desk: &Desk<T>) -> Outcome {
    let adapt = AdaptConfig::default();
    let mut std = [0.0; 2];
    for seed in SEEDS {
        // the record of batch 101 is measured after 100 updates
        let stream = StreamSpec::tta(&[CorruptionKind::GaussianNoise], 5, COLLAPSE_STEPS + 1, BATCH, seed).unwrap();
        for (k, m) in [Method::EntminOnly, Method::Imse].into_iter().enumerate() {
            let out = desk.run(ctx, &stream, m, &adapt);
            std[k] += out.records[COLLAPSE_STEPS].last_block_std / SEEDS.len() as f64;
        }
    }
    outcome(
        "9",
        "diversity collapse",
        std[0] < std[1],
        format!("gaussian noise, after {COLLAPSE_STEPS} steps, 3 seeds: last-block std entmin_only {:.5} < imse {:.5}", std[0], std[1]),
    )
}

// 10
fn top_vs_bottom<T: Real>(ctx: &Ctx, desk: &Desk<T>) -> Outcome {
    let mut acc = [0.0; 2];
    for seed in SEEDS {
        for (k, strategy) in [MaskStrategy::Top, MaskStrategy::Bottom].into_iter().enumerate() {
            let adapt = AdaptConfig {
                mask_strategy: strategy,
                mask_r: 20.0,
                ..Default::default()
            };
            acc[k] += desk.mean_accuracy(ctx, &tta_suite(seed), Method::Imse, &adapt).0 / SEEDS.len() as f64;
        }
    }
    outcome(
        "10",
        "top-R vs bottom-R selection",
        acc[0] > acc[1],
        format!("R = 20, severity-5 TTA suite, 3 seeds: top {} > bottom {}", pct(acc[0]), pct(acc[1])),
    )
}

fn bits<T: Real>(m: &VisionTransformer<T>) -> Vec<(String, Vec<u64>)> {
    m.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|x| x.as_f64().to_bits()).collect()))
        .collect()
}

// 11
fn parsimony<T: Real>(ctx: &Ctx, desk: &Desk<T>) -> (Outcome, Outcome) {
    let mut exact = true;
    let mut counts = Vec::new();
    for (strategy, r) in [(MaskStrategy::All, 100.0), (MaskStrategy::Top, 20.0), (MaskStrategy::Bottom, 20.0)] {
        let mut m = desk.model.clone();
        m.set_trainability(Trainability::Spectral);
        m.set_masks(strategy, r).unwrap();
        let expected: usize = m.trainable_parameters().iter().map(|(_, s)| masked_count(s.rank(), r)).sum();
        let adapt = AdaptConfig {
            mask_strategy: strategy,
            mask_r: r,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let stream = StreamSpec::ctta(&[CorruptionKind::GaussianNoise, CorruptionKind::FogProxy], 5, 3, 32, 0).unwrap();
        let out = desk.run(ctx, &stream, Method::Imse, &adapt);
        // every stored scalar outside the trainable entries must keep its bits
        let entries = trainable_entries(&m);
        let ids: Vec<String> = m.spectral_layers().into_iter().map(|(id, _, _)| id).collect();
        let (before, after) = (bits(&desk.model), bits(&out.model));
        let mut moved_frozen = 0;
        let mut moved_trainable = 0;
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            let layer = name.strip_suffix(".sigma").and_then(|l| ids.iter().position(|id| id == l));
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                if layer.is_some_and(|li| entries.contains(&(li, i))) {
                    moved_trainable += usize::from(x != y);
                } else {
                    moved_frozen += usize::from(x != y);
                }
            }
        }
        exact &= expected == m.trainable_count() && expected == out.trainable && moved_frozen == 0 && moved_trainable > 0;
        counts.push(format!("{strategy:?} {r}%: {expected} = {} (frozen scalars moved: {moved_frozen})", out.trainable));
    }
    let trainable = {
        let mut m = desk.model.clone();
        m.set_trainability(Trainability::Spectral);
        m.trainable_count()
    };
    let total = desk.model.dense_parameter_count();
    let ratio = trainable as f64 / total as f64;
    (
        outcome("11a", "parameter parsimony: exact count, frozen bits", exact, counts.join("; ")),
        outcome(
            "11b",
            "parameter parsimony: ratio < 0.3%",
            ratio < 0.003,
            format!(
                "default config trains {trainable} of {total} parameters = {:.3}% (limit 0.3%; at this model size the layer ranks fix the count)",
                100.0 * ratio
            ),
        ),
    )
}

fn strip_wall_time(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records.iter().map(|r| MetricsRecord { wall_ms: 0.0, ..r.clone() }).collect()
}

fn cli(args: &[&str], dir: &Path) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_imse"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("launch cli");
    if !out.status.success() {
        println!("  cli {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn pipeline(dir: &Path) -> bool {
    std::fs::write(
        dir.join("exp.toml"),
        "[pretrain]\nepochs = 1\n[stream]\nscenario = \"ctta\"\nkinds = [\"gaussian_noise\", \"contrast\", \"gaussian_noise\"]\nbatches = 3\nbatch_size = 32\n[run]\nmethod = \"imse_retrieval\"\nseed = 4\nprecision = \"f32\"\n",
    )
    .unwrap();
    cli(&["--config", "exp.toml", "pretrain", "--out", "dense.ckpt"], dir)
        && cli(&["--config", "exp.toml", "decompose", "--checkpoint", "dense.ckpt", "--out", "spectral.ckpt"], dir)
        && cli(&["--config", "exp.toml", "run", "--checkpoint", "spectral.ckpt", "--out", "run"], dir)
        && cli(&["report", "run/metrics.csv", "--out", "again"], dir)
}

// 12
fn determinism(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = pipeline(a.path()) && pipeline(b.path());
    if ok {
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        for f in ["dense.ckpt", "spectral.ckpt", "run/adapted.ckpt", "run/bank.bin", "run/summary.csv", "run/summary.txt"] {
            let same = read(a.path(), f) == read(b.path(), f);
            ok &= same;
            if !same {
                notes.push(format!("{f} differs"));
            }
        }
        let ra = read_records(a.path().join("run/metrics.csv")).unwrap();
        let rb = read_records(b.path().join("run/metrics.csv")).unwrap();
        ok &= strip_wall_time(&ra) == strip_wall_time(&rb) && ra.len() == 9;
        // re-reporting persisted records reproduces every file
        for f in [report::METRICS_FILE, report::SUMMARY_CSV, report::SUMMARY_TXT] {
            ok &= read(a.path(), &format!("run/{f}")) == read(a.path(), &format!("again/{f}"));
        }
        // checkpoint and bank round trips
        let ck: VisionTransformer<f64> = load_checkpoint(a.path().join("run/adapted.ckpt")).unwrap();
        ok &= checkpoint_bytes(&ck) == read(a.path(), "run/adapted.ckpt");
        let bank = DomainBank::restore(a.path().join("run/bank.bin")).unwrap();
        ok &= bank.to_bytes() == read(a.path(), "run/bank.bin");
        notes.push(format!("{} records, bank of {} entries", ra.len(), bank.len()));
    }
    let mut dense32: VisionTransformer<f32> = ctx.dense.cast();
    dense32.set_trainability(Trainability::None);
    let p = a.path().join("source.ckpt");
    save_checkpoint(&dense32, &p).unwrap();
    let back: VisionTransformer<f32> = load_checkpoint(&p).unwrap();
    ok &= checkpoint_bytes(&back) == std::fs::read(&p).unwrap();
    ok &= accuracy(&back, &ctx.test, 250).unwrap() == accuracy(&dense32, &ctx.test, 250).unwrap();
    outcome(
        "12",
        "determinism and persistence",
        ok,
        format!(
            "pretrain -> decompose -> run -> report twice through the CLI: checkpoints, bank, summaries and metrics (wall time excluded) identical; report re-run and file round trips exact; {}; {:.0} s",
            notes.join(", "),
            secs(start)
        ),
    )
}

fn desk_criteria<T: Real>(ctx: &Ctx, wanted: &dyn Fn(&str) -> bool, out: &mut Vec<Outcome>) {
    let desk = Desk::<T>::new(ctx);
    let mut go = |id: &str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let o = f();
            report_line(&o);
            out.push(o);
        }
    };
    go("7", &|| tta_improvement(ctx, &desk));
    go("8", &|| ctta_ordering(ctx, &desk));
    go("9", &|| diversity_collapse(ctx, &desk));
    go("10", &|| top_vs_bottom(ctx, &desk));
    if wanted("11") {
        let (a, b) = parsimony(ctx, &desk);
        report_line(&a);
        report_line(&b);
        out.extend([a, b]);
    }
}

fn report_line(o: &Outcome) {
    println!("{} {:>3}  {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title, o.detail);
}

fn main() {
    let filter: Option<Vec<String>> =
        std::env::var("IMSE_ACCEPTANCE").ok().map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let wanted = |id: &str| filter.as_ref().map_or(true, |f| f.iter().any(|x| x == id));
    let precision = Precision::from_env().expect("IMSE_PRECISION must be f32 or f64").unwrap_or(Precision::F32);
    let (train, test) = make_source_task(0);
    let dense = source_model(&train);
    let clean = accuracy(&dense, &test, 250).unwrap();
    let decomposed = accuracy(&dense.decompose().unwrap(), &test, 250).unwrap();
    println!(
        "setup: clean test accuracy {} dense, {} decomposed (baseline must reach 90%); desk precision {precision:?}",
        pct(clean),
        pct(decomposed)
    );
    assert!(clean >= 0.9, "source model below the 90% clean baseline");
    let ctx = Ctx { train, test, dense };

    let mut results = Vec::new();
    let mut go = |id: &str, f: &dyn Fn() -> Outcome| {
        if wanted(id) {
            let o = f();
            report_line(&o);
            results.push(o);
        }
    };
    go("1", &|| gradient_fidelity(&ctx));
    go("2", &svd_correctness);
    go("3", &|| alignment_oracle(&ctx));
    go("4", &entropy_filtering);
    go("5", &symmetric_kl);
    go("6", &shift_detection);
    match precision {
        Precision::F32 => desk_criteria::<f32>(&ctx, &wanted, &mut results),
        Precision::F64 => desk_criteria::<f64>(&ctx, &wanted, &mut results),
    }
    if wanted("12") {
        let o = determinism(&ctx);
        report_line(&o);
        results.push(o);
    }

    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!();
    println!("acceptance: {} of {} passed", results.len() - failed.len(), results.len());
    for o in &results {
        println!("{} {:>3}  {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.title);
    }
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}
