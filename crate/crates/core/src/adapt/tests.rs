use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{LayerAlignment, ViTConfig};
use crate::spectral::CodeHolder;

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        frozen_tail_blocks: 1,
        dm_tail_blocks: 1,
        ..Default::default()
    }
}

/// Decomposed model whose head is sharpened so some samples pass the filter.
fn confident_model(seed: u64) -> VisionTransformer<f64> {
    let mut m = VisionTransformer::<f64>::build(small(), seed).unwrap();
    m.head.weight.data_mut().iter_mut().for_each(|w| *w *= 60.0);
    m.decompose().unwrap()
}

fn images(seed: u64, b: usize, cfg: &ViTConfig) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * cfg.channels * cfg.image_size * cfg.image_size;
    Tensor::new(
        [b, cfg.channels, cfg.image_size, cfg.image_size],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn entropy_with_grad(logits: Vec<f64>, b: usize, c: usize) -> (f64, Vec<bool>, Vec<f64>) {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new([b, c], logits).unwrap().with_requires_grad(true));
    let (loss, kept) = entropy_loss(&mut g, x, 0.4).unwrap();
    let val = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    (val, kept, grads.get_or_zeros(x))
}

#[test]
fn confident_sample_kept() {
    let (loss, kept, _) = entropy_with_grad(vec![100.0, 0.0, 0.0, 0.0], 1, 4);
    assert!(kept[0]);
    assert!(loss.abs() < 1e-12);
}

#[test]
fn uniform_sample_filtered_with_zero_gradient() {
    let (loss, kept, grad) = entropy_with_grad(vec![0.3; 10], 1, 10);
    assert!(!kept[0]);
    assert_eq!(loss, 0.0);
    assert!(grad.iter().all(|x| *x == 0.0));
}

#[test]
fn mixed_batch_matches_oracle() {
    let logits = vec![5.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.2, 0.0, 0.0, 8.0, 1.0, 0.5];
    let (loss, kept, grad) = entropy_with_grad(logits.clone(), 3, 4);
    let (want, want_kept) = entropy_value(&logits, 4, 0.4);
    assert_eq!(kept, want_kept);
    assert_eq!(kept, vec![true, false, true]);
    assert!((loss - want).abs() < 1e-14);
    assert!(grad[4..8].iter().all(|x| *x == 0.0));
}

#[test]
fn filtered_sample_perturbation_is_invisible() {
    let a = vec![5.0, 0.0, 0.0, 0.0, 0.1, 0.0, 0.2, 0.0];
    let mut b = a.clone();
    b[4] = 0.3;
    b[7] = -0.1;
    let (la, ka, ga) = entropy_with_grad(a, 2, 4);
    let (lb, kb, gb) = entropy_with_grad(b, 2, 4);
    assert_eq!(ka, kb);
    assert_eq!(la, lb);
    assert_eq!(ga, gb);
}

#[test]
fn diversity_arithmetic() {
    let stats = AlignmentStats {
        layers: vec![LayerAlignment {
            layer: "l".into(),
            mean: vec![0.0, 0.0],
            std: vec![0.5, 0.3],
            tokens: 4,
        }],
    };
    assert!((diversity_value(&stats) + 0.4).abs() < 1e-15);
    let mut g = Graph::<f64>::new();
    let std = g.constant(Tensor::new([2], vec![0.5, 0.3]).unwrap());
    let mean = g.constant(Tensor::zeros([2]));
    let input = g.constant(Tensor::zeros([1, 1]));
    let av = AlignmentVars {
        layer: "l".into(),
        rank: 2,
        mean,
        std,
        input,
        tokens: 4,
    };
    let d = diversity_loss(&mut g, &[av.clone(), av]).unwrap();
    assert!((g.value(d).item() + 0.8).abs() < 1e-15);
    assert!(diversity_loss::<f64>(&mut g, &[]).is_err());
}

#[test]
fn adam_matches_scalar_reference_on_quadratic() {
    // f(x) = 3 (x - 2)^2
    let grad = |x: f64| 6.0 * (x - 2.0);
    let mut adam = Adam::new(1, 0.1, (0.9, 0.999), 1e-8);
    let mut p = vec![-1.0];
    let (mut x, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
    for t in 1..=50 {
        let g0 = grad(p[0]);
        let (g, skipped) = sam_gradient(&p, &[g0], 0.0, |_| unreachable!()).unwrap();
        assert!(skipped);
        adam.step(&mut p, &g);

        let gx = grad(x);
        let (b1, b2) = (0.9f64, 0.999f64);
        m = b1 * m + (1.0 - b1) * gx;
        v = b2 * v + (1.0 - b2) * gx * gx;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert_eq!(p[0], x, "step {t}");
    }
}

#[test]
fn sam_evaluates_at_the_ascent_point() {
    // f(x) = sum a_i x_i^2, ascent point x + rho g / |g|
    let a = [1.0, 4.0];
    let x = [0.5, -0.25];
    let g: Vec<f64> = x.iter().zip(a).map(|(x, a)| 2.0 * a * x).collect();
    let (g2, skipped) = sam_gradient(&x, &g, 0.1, |p| Ok(p.iter().zip(a).map(|(x, a)| 2.0 * a * x).collect())).unwrap();
    assert!(!skipped);
    let n = norm(&g);
    for i in 0..2 {
        let want = 2.0 * a[i] * (x[i] + 0.1 * g[i] / n);
        assert!((g2[i] - want).abs() < 1e-15);
    }
    let (_, skipped) = sam_gradient(&x, &[0.0, 0.0], 0.1, |_| unreachable!()).unwrap();
    assert!(skipped);
}

fn snapshot(m: &VisionTransformer<f64>) -> Vec<(String, Vec<u64>)> {
    m.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn masked_and_frozen_entries_bit_identical() {
    let mut m = confident_model(1);
    m.set_masks(MaskStrategy::Top, 25.0).unwrap();
    let cfg = AdaptConfig {
        mask_strategy: MaskStrategy::Top,
        mask_r: 25.0,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let entries = trainable_entries(&m);
    assert_eq!(entries.len(), m.trainable_count());
    let before = snapshot(&m);
    let mut opt = cfg.new_optimizer(entries.len());
    for step in 0..100 {
        let x = images(step, 4, m.config());
        adapt_step(&mut m, &x, &cfg, &mut opt).unwrap();
    }
    let after = snapshot(&m);
    let layers: Vec<String> = m.spectral_layers().into_iter().map(|(id, _, _)| id).collect();
    let mut changed = 0;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let trainable = name.strip_suffix(".sigma").and_then(|l| layers.iter().position(|id| id == l)).is_some_and(|li| entries.contains(&(li, i)));
            if trainable {
                changed += usize::from(x != y);
            } else {
                assert_eq!(x, y, "{name}[{i}] moved");
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn zero_lambda_equals_entropy_only() {
    let run = |mode: Mode| {
        let mut m = confident_model(2);
        let cfg = AdaptConfig {
            mode,
            lambda_dm: 0.0,
            ..Default::default()
        };
        let mut opt = cfg.new_optimizer(trainable_entries(&m).len());
        let mut reports = Vec::new();
        for s in 0..5 {
            reports.push(adapt_step(&mut m, &images(s, 6, &small()), &cfg, &mut opt).unwrap());
        }
        (m.extract_code().to_bytes(), reports)
    };
    let (a, ra) = run(Mode::Imse);
    let (b, rb) = run(Mode::EntminOnly);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn zero_learning_rate_keeps_predictions() {
    let mut m = confident_model(3);
    let cfg = AdaptConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    let x = images(9, 6, m.config());
    let before = m.predict(&x).unwrap();
    let code = m.extract_code().to_bytes();
    let mut opt = cfg.new_optimizer(trainable_entries(&m).len());
    let rep = adapt_step(&mut m, &x, &cfg, &mut opt).unwrap();
    assert_eq!(rep.predictions, before);
    assert_eq!(m.predict(&x).unwrap(), before);
    assert_eq!(m.extract_code().to_bytes(), code);
}

#[test]
fn fully_filtered_batch_without_diversity_is_a_noop() {
    let mut m = confident_model(4);
    let cfg = AdaptConfig {
        mode: Mode::EntminOnly,
        entropy_margin_factor: 1e-12,
        ..Default::default()
    };
    let code = m.extract_code().to_bytes();
    let mut opt = cfg.new_optimizer(trainable_entries(&m).len());
    let rep = adapt_step(&mut m, &images(0, 4, &small()), &cfg, &mut opt).unwrap();
    assert!(rep.noop && rep.kept_samples == 0);
    assert_eq!(opt.steps(), 0);
    assert_eq!(m.extract_code().to_bytes(), code);
}

#[test]
fn report_terms_are_consistent() {
    let mut m = confident_model(5);
    let cfg = AdaptConfig::default();
    let mut opt = cfg.new_optimizer(trainable_entries(&m).len());
    let rep = adapt_step(&mut m, &images(1, 8, &small()), &cfg, &mut opt).unwrap();
    assert!(rep.entmin >= 0.0 && rep.dm <= 0.0);
    assert!((rep.combined - (rep.entmin + 50.0 * rep.dm)).abs() < 1e-12);
    assert!(rep.kept_samples <= rep.batch_size && rep.batch_size == 8);
    assert!(!rep.layer_std.is_empty());
}

/// Central differences on every trainable sigma of the full objective.
#[test]
fn objective_gradient_matches_finite_differences() {
    let mut m = confident_model(6);
    let cfg = AdaptConfig::default();
    let x = images(3, 4, m.config());
    let entries = trainable_entries(&m);
    let ev = evaluate(&m, &x, &cfg, &entries).unwrap();
    assert!(ev.kept.iter().any(|k| *k), "need at least one kept sample");
    let base = gather(&m, &entries);
    let h = 1e-5;
    for (j, &a) in ev.grad.iter().enumerate() {
        let mut p = base.clone();
        p[j] += h;
        scatter(&mut m, &entries, &p);
        let up = evaluate(&m, &x, &cfg, &entries).unwrap();
        p[j] -= 2.0 * h;
        scatter(&mut m, &entries, &p);
        let down = evaluate(&m, &x, &cfg, &entries).unwrap();
        assert_eq!(up.kept, ev.kept);
        assert_eq!(down.kept, ev.kept);
        let n = (up.combined - down.combined) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
        assert!(rel <= 1e-4, "entry {j}: analytic {a} numeric {n}");
    }
    scatter(&mut m, &entries, &base);
}

#[test]
fn measure_agrees_with_step_diagnostics() {
    let mut m = confident_model(7);
    let cfg = AdaptConfig::default();
    let x = images(4, 6, m.config());
    let seen = measure(&m, &x, &cfg).unwrap();
    let mut opt = cfg.new_optimizer(trainable_entries(&m).len());
    let rep = adapt_step(&mut m, &x, &cfg, &mut opt).unwrap();
    assert_eq!(seen.predictions, rep.predictions);
    assert_eq!(seen.kept_samples, rep.kept_samples);
    assert!((seen.entmin - rep.entmin).abs() < 1e-12);
    assert!((seen.dm - rep.dm).abs() < 1e-12);
    for ((a, x), (b, y)) in seen.layer_std.iter().zip(&rep.layer_std) {
        assert_eq!(a, b);
        assert!((x - y).abs() < 1e-12);
    }
}
