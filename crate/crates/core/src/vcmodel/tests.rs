use super::*;
use crate::conditioning::{QUALITY_DIM, SCENE_DIM};
use crate::nn::tests::random;
use rand::{Rng, SeedableRng};
use std::collections::BTreeMap;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_blocks: 1,
        n_dec_blocks: 1,
        variant,
        ..ModelConfig::default()
    }
}

const FW_FW: Variant = Variant::Conditioned {
    quality: CondMode::Frame,
    scene: CondMode::Frame,
};

fn conditioned_source(t: usize, seed: u64) -> SourceFeatures {
    SourceFeatures {
        content: random(t, CONTENT_DIM, seed),
        quality: Some(random(t, QUALITY_DIM, seed + 1)),
        scene: Some(random(t, SCENE_DIM, seed + 2)),
    }
}

fn example(t_s: usize, t_t: usize, seed: u64) -> Example {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Example {
        source: conditioned_source(t_s, seed),
        target_content: random(t_t, CONTENT_DIM, seed + 3),
        target_mel: Array2::from_shape_simple_fn((t_s, 80), || rng.gen_range(-11.0..0.0)),
    }
}

#[test]
fn output_shape_follows_source() {
    let p = ModelParams::init(&small(FW_FW), 1).unwrap();
    let src = conditioned_source(7, 1);
    let out = p.forward(&src, random(11, CONTENT_DIM, 2).view()).unwrap();
    assert_eq!(out.dim(), (7, 80));
    let out1 = p.forward(&src, random(3, CONTENT_DIM, 2).view()).unwrap();
    assert_eq!(out1.dim(), (7, 80));
    assert_eq!(out, p.forward(&src, random(11, CONTENT_DIM, 2).view()).unwrap());
}

#[test]
fn cross_attention_rows_are_distributions() {
    let p = ModelParams::init(&small(FW_FW), 5).unwrap();
    let trace = p.forward_trace(&conditioned_source(6, 3), random(9, CONTENT_DIM, 4).view()).unwrap();
    for a in trace.cross_attention() {
        assert_eq!(a.dim(), (6, 9));
        for row in a.rows() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn duplicated_single_target_frame_is_invisible() {
    let p = ModelParams::init(&small(Variant::Unconditioned), 2).unwrap();
    let src = SourceFeatures::unconditioned(random(5, CONTENT_DIM, 1));
    let one = random(1, CONTENT_DIM, 9);
    let two = concatenate(Axis(0), &[one.view(), one.view()]).unwrap();
    let a = p.forward(&src, one.view()).unwrap();
    let b = p.forward(&src, two.view()).unwrap();
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn shape_and_variant_errors() {
    let p = ModelParams::init(&small(FW_FW), 1).unwrap();
    let bad = SourceFeatures::unconditioned(random(4, CONTENT_DIM, 1));
    assert!(matches!(
        p.forward(&bad, random(3, CONTENT_DIM, 2).view()),
        Err(CdtError::Validation(_))
    ));
    assert!(matches!(
        p.forward(&conditioned_source(4, 1), random(3, 100, 2).view()),
        Err(CdtError::Shape(_))
    ));
    let wide = ModelConfig {
        n_heads: 3,
        ..small(FW_FW)
    };
    assert!(matches!(ModelParams::init(&wide, 1), Err(CdtError::Config { .. })));
    assert!("fw-xx".parse::<Variant>().is_err());
    for v in Variant::ALL {
        assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
    }
}

#[test]
fn non_finite_activation_names_layer() {
    let mut p = ModelParams::init(&small(Variant::Unconditioned), 1).unwrap();
    p.tensors.source.input.w[[0, 0]] = f64::NAN;
    let err = p
        .forward(
            &SourceFeatures::unconditioned(random(3, CONTENT_DIM, 1)),
            random(2, CONTENT_DIM, 2).view(),
        )
        .unwrap_err();
    match err {
        CdtError::Numeric { layer } => assert_eq!(layer, "source.input"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn l1_loss_matches_elementwise_mean() {
    let cfg = MelConfig::default();
    let a = MelSpectrogram::new(random(6, 80, 1), &cfg).unwrap();
    let b = MelSpectrogram::new(random(6, 80, 2), &cfg).unwrap();
    let mut acc = 0.0;
    for t in 0..6 {
        for k in 0..80 {
            acc += (a.values[[t, k]] - b.values[[t, k]]).abs();
        }
    }
    assert!((l1_loss(&a, &b).unwrap().value - acc / 480.0).abs() < 1e-12);
    assert_eq!(l1_loss(&a, &a).unwrap().value, 0.0);
    let shifted = MelSpectrogram::new(&a.values + 0.5, &cfg).unwrap();
    assert!((l1_loss(&shifted, &a).unwrap().value - 0.5).abs() < 1e-12);
    let short = MelSpectrogram::new(random(5, 80, 2), &cfg).unwrap();
    assert!(matches!(l1_loss(&a, &short), Err(CdtError::Shape(_))));
}

fn coords(t: &ModelTensors, n: usize, seed: u64) -> Vec<(String, usize)> {
    let named = t.named();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, usize)> = Vec::new();
    for want in ["projection.w_quality", "projection.w_scene"] {
        let (_, v) = named.iter().find(|(k, _)| k == want).unwrap();
        for _ in 0..3 {
            out.push((want.to_string(), rng.gen_range(0..v.len())));
        }
    }
    while out.len() < n {
        let (k, v) = &named[rng.gen_range(0..named.len())];
        out.push((k.clone(), rng.gen_range(0..v.len())));
    }
    out
}

fn perturbed(p: &ModelParams, name: &str, idx: usize, delta: f64) -> ModelParams {
    let mut q = p.clone();
    for (k, v) in q.tensors.named_mut() {
        if k == name {
            let c = v.ncols();
            v[[idx / c, idx % c]] += delta;
        }
    }
    q
}

#[test]
fn gradients_match_central_differences() {
    let mut p = ModelParams::init(&small(FW_FW), 11).unwrap();
    // Non-trivial norms and biases so their gradients are exercised.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for (_, v) in p.tensors.named_mut() {
        if v.nrows() == 1 {
            v.mapv_inplace(|x| x + rng.gen_range(-0.2..0.2));
        }
    }
    let batch = vec![example(5, 4, 1), example(3, 6, 2)];
    let (g, _) = gradients(&p, &batch).unwrap();
    let grads: BTreeMap<String, Array2<f64>> = g.named().into_iter().map(|(k, v)| (k, v.clone())).collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, idx) in coords(&p.tensors, 50, 4) {
        let lp = batch_loss(&perturbed(&p, &name, idx, eps), &batch).unwrap().value;
        let lm = batch_loss(&perturbed(&p, &name, idx, -eps), &batch).unwrap().value;
        let fd = (lp - lm) / (2.0 * eps);
        let gv = &grads[&name];
        let an = gv[[idx / gv.ncols(), idx % gv.ncols()]];
        let denom = fd.abs().max(an.abs());
        if denom > 1e-9 {
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn duplicate_example_has_batch_of_one_gradient() {
    let p = ModelParams::init(&small(FW_FW), 3).unwrap();
    let ex = example(4, 5, 9);
    let (g1, l1) = gradients(&p, std::slice::from_ref(&ex)).unwrap();
    let (g2, l2) = gradients(&p, &[ex.clone(), ex]).unwrap();
    assert!((l1.value - l2.value).abs() < 1e-12);
    for ((_, a), (_, b)) in g1.named().iter().zip(g2.named()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn condition_inputs_receive_gradient() {
    let p = ModelParams::init(&small(FW_FW), 4).unwrap();
    let ex = example(6, 6, 4);
    let trace = p.forward_trace(&ex.source, ex.target_content.view()).unwrap();
    let d = (&trace.output - &ex.target_mel).mapv(f64::signum);
    let mut g = p.zero_tensors();
    let dx = p.backward(&trace, &d, &mut g);
    let (dq, ds) = p.condition_input_grads(&dx).unwrap();
    assert!(dq.iter().any(|v| v.abs() > 0.0));
    assert!(ds.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn zero_projections_reproduce_unconditioned_forward() {
    let dt = ModelParams::init(&small(Variant::Unconditioned), 21).unwrap();
    let cdt = ModelParams::init(
        &ModelConfig {
            zero_init_projections: true,
            ..small(FW_FW)
        },
        21,
    )
    .unwrap();
    let src = conditioned_source(8, 5);
    let tgt = random(7, CONTENT_DIM, 6);
    let a = dt
        .forward(&SourceFeatures::unconditioned(src.content.clone()), tgt.view())
        .unwrap();
    let b = cdt.forward(&src, tgt.view()).unwrap();
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn default_size_is_desk_scale() {
    let p = ModelParams::init(
        &ModelConfig {
            variant: FW_FW,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    let n = p.n_params();
    assert!((1_000_000..=4_000_000).contains(&n), "{n}");
}
