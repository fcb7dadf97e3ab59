use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::spectral::{CodeHolder, MaskStrategy, SpectralCode};
use crate::tensor::{Graph, Tensor};

fn images(rng: &mut ChaCha8Rng, b: usize, cfg: &ViTConfig) -> Tensor<f64> {
    let n = b * cfg.channels * cfg.image_size * cfg.image_size;
    Tensor::new(
        [b, cfg.channels, cfg.image_size, cfg.image_size],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn small() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ..Default::default()
    }
}

#[test]
fn logits_shape_and_determinism() {
    let cfg = ViTConfig::default();
    let a = VisionTransformer::<f64>::build(cfg.clone(), 7).unwrap();
    let b = VisionTransformer::<f64>::build(cfg.clone(), 7).unwrap();
    assert_eq!(a, b);
    let c = VisionTransformer::<f64>::build(cfg.clone(), 8).unwrap();
    assert_ne!(a, c);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images(&mut rng, 5, &cfg);
    let l1 = a.forward(&x).unwrap();
    assert_eq!(l1.shape(), [5, 10]);
    let l2 = a.forward(&x).unwrap();
    assert_eq!(l1.data(), l2.data());
}

#[test]
fn wrong_image_shape_rejected() {
    let cfg = small();
    let m = VisionTransformer::<f64>::build(cfg, 0).unwrap();
    let x = Tensor::<f64>::zeros([1, 3, 9, 9]);
    assert!(matches!(m.forward(&x), Err(Error::Shape { .. })));
}

#[test]
fn decomposition_preserves_function() {
    for fused in [false, true] {
        let cfg = ViTConfig {
            fused_qkv: fused,
            ..small()
        };
        let dense = VisionTransformer::<f64>::build(cfg.clone(), 3).unwrap();
        let spec = dense.decompose().unwrap();
        assert!(spec.is_decomposed() && !dense.is_decomposed());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = images(&mut rng, 3, &cfg);
        let a = dense.forward(&x).unwrap();
        let b = spec.forward(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12, "{p} vs {q}");
        }
        assert_eq!(spec.dense_parameter_count(), dense.parameter_count());
    }
}

#[test]
fn trainable_counts() {
    let cfg = ViTConfig {
        frozen_tail_blocks: 3,
        ..Default::default()
    };
    let m = VisionTransformer::<f32>::build(cfg, 0).unwrap().decompose().unwrap();
    let tp = m.trainable_parameters();
    assert!(tp.iter().all(|(id, _)| id.starts_with("blocks.0.")));
    assert_eq!(tp.len(), 6);

    let cfg = ViTConfig {
        frozen_tail_blocks: 0,
        ..Default::default()
    };
    let m = VisionTransformer::<f32>::build(cfg, 0).unwrap().decompose().unwrap();
    let total: usize = m.spectral_layers().iter().map(|(_, _, s)| s.d_out().min(s.d_in())).sum();
    assert_eq!(m.trainable_count(), total);
    assert_eq!(m.extract_code().scalar_count(), total);

    let cfg = ViTConfig {
        spectral_targets: vec![Target::AttnProj, Target::MlpFc2],
        ..Default::default()
    };
    let mut m = VisionTransformer::<f32>::build(cfg, 0).unwrap().decompose().unwrap();
    assert_eq!(m.trainable_count(), 384);
    m.set_masks(MaskStrategy::Top, 20.0).unwrap();
    assert_eq!(m.trainable_count(), 3 * 2 * 13);
}

#[test]
fn only_trainable_sigmas_require_grad() {
    let m = VisionTransformer::<f64>::build(small(), 0).unwrap().decompose().unwrap();
    let flagged: Vec<String> = m
        .named_tensors()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n)
        .collect();
    assert_eq!(flagged.len(), 6);
    assert!(flagged.iter().all(|n| n.starts_with("blocks.0.") && n.ends_with(".sigma")));
}

#[test]
fn trace_params_align_with_named_tensors() {
    let cfg = small();
    let mut m = VisionTransformer::<f64>::build(cfg.clone(), 0).unwrap();
    m.set_trainability(Trainability::All);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images(&mut rng, 2, &cfg);
    let tr = m.trace(&x, &Probes::default(), true).unwrap();
    let names = m.named_tensors();
    assert_eq!(tr.params.len(), names.len());
    for (v, (_, t)) in tr.params.iter().zip(&names) {
        assert_eq!(tr.graph.shape(*v), t.shape());
    }
}

#[test]
fn embedded_tokens_exclude_class_token() {
    let cfg = small();
    let m = VisionTransformer::<f64>::build(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images(&mut rng, 2, &cfg);
    let out = m
        .forward_with_probes(
            &x,
            &Probes {
                embedding: true,
                ..Default::default()
            },
        )
        .unwrap();
    let e = out.embedded.unwrap();
    assert_eq!(e.shape(), [2, cfg.num_patches(), cfg.embed_dim]);
    // patch 0 of image 1, by hand
    let patches = patchify(&x, &cfg).unwrap();
    let row = &patches.data()[cfg.num_patches() * cfg.patch_dim()..][..cfg.patch_dim()];
    for ch in 0..cfg.embed_dim {
        let w = &m.patch_embed.weight.data()[ch * cfg.patch_dim()..][..cfg.patch_dim()];
        let want: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            + m.patch_embed.bias.data()[ch]
            + m.pos_embed.data()[cfg.embed_dim + ch];
        let got = e.data()[cfg.num_patches() * cfg.embed_dim + ch];
        assert!((want - got).abs() < 1e-12);
    }
    assert_eq!(m.embed(&x).unwrap(), e);
}

#[test]
fn capture_of_dense_layer_rejected() {
    let cfg = small();
    let m = VisionTransformer::<f64>::build(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images(&mut rng, 1, &cfg);
    let probes = Probes {
        alignment: vec!["blocks.0.attn.q".into()],
        embedding: false,
    };
    match m.forward_with_probes(&x, &probes) {
        Err(Error::LayerMismatch { layer, .. }) => assert_eq!(layer, "blocks.0.attn.q"),
        other => panic!("unexpected {:?}", other.err()),
    }
    let cfg2 = ViTConfig {
        spectral_targets: vec![Target::MlpFc2],
        ..small()
    };
    let m = VisionTransformer::<f64>::build(cfg2, 0).unwrap().decompose().unwrap();
    assert!(m.forward_with_probes(&x, &probes).is_err());
}

fn stats_of(x: Tensor<f64>, v: Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let vv = g.constant(v);
    let a = alignment_stats(&mut g, "l", xv, vv).unwrap();
    (g.value(a.mean).to_f64_vec(), g.value(a.std).to_f64_vec())
}

#[test]
fn identical_inputs_have_zero_std() {
    let x = Tensor::new([4, 2], vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7, 0.3, -0.7]).unwrap();
    let v = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (_, std) = stats_of(x, v);
    assert!(std.iter().all(|s| *s == 0.0));
}

#[test]
fn symmetric_alignments() {
    let s = 0.5f64.sqrt();
    let x = Tensor::new([2, 2], vec![s, s, -s, -s]).unwrap();
    let v = Tensor::new([2, 1], vec![s, s]).unwrap();
    let (mean, std) = stats_of(x, v);
    assert!(mean[0].abs() < 1e-15);
    assert!((std[0] - 1.0).abs() < 1e-15);
}

#[test]
fn alignment_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 0.6, 0.0, 0.8]).unwrap();
    let a = stats_of(Tensor::new([10, 3], xs.clone()).unwrap(), v.clone());
    let b = stats_of(Tensor::new([10, 3], xs.iter().map(|x| 7.5 * x).collect()).unwrap(), v);
    for (p, q) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn probes_report_requested_layers_in_order() {
    let cfg = small();
    let m = VisionTransformer::<f64>::build(cfg.clone(), 0).unwrap().decompose().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = images(&mut rng, 2, &cfg);
    let want = vec!["blocks.1.mlp.fc2".to_string(), "blocks.0.attn.k".to_string()];
    let out = m
        .forward_with_probes(
            &x,
            &Probes {
                alignment: want.clone(),
                embedding: false,
            },
        )
        .unwrap();
    let st = out.alignment.unwrap();
    let got: Vec<String> = st.layers.iter().map(|l| l.layer.clone()).collect();
    assert_eq!(got, want);
    assert_eq!(st.layers[0].tokens, 2 * cfg.num_tokens());
    assert_eq!(st.layers[0].std.len(), cfg.embed_dim);
    assert!(st.layers.iter().all(|l| l.std.iter().all(|s| *s >= 0.0)));
    assert_eq!(m.dm_layers().len(), 6);
    assert!(m.dm_layers().iter().all(|l| l.starts_with("blocks.1.")));
}

#[test]
fn code_round_trip_and_zero_code() {
    let cfg = small();
    let mut m = VisionTransformer::<f64>::build(cfg.clone(), 0).unwrap().decompose().unwrap();
    let code = m.extract_code();
    m.load_code(&code).unwrap();
    assert_eq!(m.extract_code(), code);

    let zeros = SpectralCode::new(code.layers().iter().map(|(id, s)| (id.clone(), vec![0.0; s.len()])).collect()).unwrap();
    m.load_code(&zeros).unwrap();
    for (_, _, s) in m.spectral_layers() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, s.d_in()], 0.7));
        let (y, _) = s.apply(&mut g, x).unwrap();
        let out = g.value(y).data();
        let bias = s.bias().data();
        for row in out.chunks(s.d_out()) {
            assert_eq!(row, bias);
        }
    }

    let bad = SpectralCode::new(vec![("blocks.0.attn.q".into(), vec![1.0])]).unwrap();
    assert!(matches!(m.load_code(&bad), Err(Error::LayerMismatch { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = small();
    let dense = VisionTransformer::<f64>::build(cfg.clone(), 9).unwrap();
    let bytes = checkpoint_bytes(&dense);
    let back: VisionTransformer<f64> = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&back), bytes);

    let mut spec = dense.decompose().unwrap();
    spec.set_masks(MaskStrategy::All, 100.0).unwrap();
    let bytes = checkpoint_bytes(&spec);
    let back: VisionTransformer<f64> = checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint_bytes(&back), bytes);
    assert_eq!(back, spec);

    // f32 loading narrows; saving again widens exactly
    let narrow: VisionTransformer<f32> = checkpoint_from_bytes(&bytes).unwrap();
    let again: VisionTransformer<f32> = checkpoint_from_bytes(&checkpoint_bytes(&narrow)).unwrap();
    assert_eq!(again, narrow);

    let cut = &bytes[..bytes.len() - 20];
    match checkpoint_from_bytes::<f64>(cut) {
        Err(Error::Format { offset, .. }) => assert!(offset > 0),
        other => panic!("unexpected {:?}", other.err()),
    }
    let mut bad = bytes.clone();
    bad.extend_from_slice(b"x");
    assert!(checkpoint_from_bytes::<f64>(&bad).is_err());
}
