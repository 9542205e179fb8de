mod common;

use common::*;
use nlcen::segnet::{seg_loss, total_loss, total_loss_value, training_loss};
use nlcen::{ForwardCtx, ModelConfig, Nlce, NlceConfig, NlceParts, Nlcen, Variant};
use nlcen_tensor::{grad_check, Graph, ParamStore, Tensor, TensorError, Var};

fn small(variant: Variant, side: usize) -> ModelConfig {
    ModelConfig {
        input_hw: side,
        stage_channels: [2, 3, 4, 5],
        pyramid_width: 4,
        codewords: 3,
        variant,
        ..ModelConfig::default()
    }
}

fn image(b: usize, c: usize, side: usize) -> Tensor {
    Tensor::from_fn([b, c, side, side], |i| 128.0 + 100.0 * ((i as f64) * 0.173).sin())
}

/// Sets every parameter (buffers excluded) to irregular non-zero values.
fn perturb(store: &mut ParamStore, scale: f64) {
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for (i, n) in names.iter().enumerate() {
        let t = store.tensor(n).unwrap();
        let shape = t.shape().to_vec();
        let base = t.data().to_vec();
        let vals = fixture(base.len(), i as f64 * 0.37);
        let data = base.iter().zip(vals).map(|(b, v)| b + scale * v).collect();
        store.set(n, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

#[test]
fn backbone_halves_resolution_per_stage() {
    let net = Nlcen::new(ModelConfig::default()).unwrap();
    let params = net.init(0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(1, 1, 64));
    let c = net.backbone(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
    let shapes: Vec<&[usize]> = c.iter().map(|&v| g.shape(v)).collect();
    assert_eq!(shapes, [&[1, 8, 16, 16][..], &[1, 16, 8, 8], &[1, 32, 4, 4], &[1, 64, 2, 2]]);
}

#[test]
fn input_side_must_divide_by_32() {
    assert!(Nlcen::new(ModelConfig { input_hw: 48, ..ModelConfig::default() }).is_err());
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let params = net.init(0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(1, 1, 40));
    assert!(net.forward(&mut g, &params, x, ForwardCtx::EVAL).is_err());
}

#[test]
fn zero_image_with_zeroed_block_scales_is_finite() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let mut params = net.init(3).unwrap();
    for s in 2..=5 {
        let name = format!("backbone.conv{s}.block0.b.bn.weight");
        let len = params.tensor(&name).unwrap().len();
        params.set(&name, Tensor::zeros([len])).unwrap();
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 32, 32]));
    let out = net.forward(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
    for v in out.levels.iter().chain([&out.refined]) {
        assert!(g.value(*v).all_finite());
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let run = || {
        let params = net.init(11).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(2, 1, 32));
        let out = net.forward(&mut g, &params, x, ForwardCtx::TRAIN).unwrap();
        g.value(out.refined).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn all_outputs_have_input_resolution() {
    for side in [32, 64, 96] {
        let net = Nlcen::new(small(Variant::Full, side)).unwrap();
        let params = net.init(0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(1, 1, side));
        let out = net.forward(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
        for v in out.levels.iter().chain([&out.refined]) {
            assert_eq!(g.shape(*v), &[1, 2, side, side]);
        }
    }
}

#[test]
fn rgb_inputs_change_only_the_stem() {
    let net = Nlcen::new(ModelConfig { in_channels: 3, ..small(Variant::NoNlce, 32) }).unwrap();
    let params = net.init(0).unwrap();
    assert_eq!(params.tensor("backbone.stem.conv.weight").unwrap().shape(), &[2, 3, 3, 3]);
    let mut g = Graph::new();
    let x = g.constant(image(1, 3, 32));
    assert!(net.forward(&mut g, &params, x, ForwardCtx::EVAL).is_ok());
}

#[test]
fn variant_registries_nest() {
    let names = |v| {
        let net = Nlcen::new(small(v, 32)).unwrap();
        net.init(0).unwrap()
    };
    let base = names(Variant::NoNlce);
    assert_eq!(base.names().filter(|n| n.starts_with("nlce")).count(), 0);
    for v in [Variant::Full, Variant::NoNl, Variant::NoCe] {
        let store = names(v);
        assert!(store.len() > base.len(), "{v}");
        for p in base.iter() {
            let other = store.tensor(&p.name).unwrap_or_else(|| panic!("{v} lacks {}", p.name));
            // Same shapes and the same initial values for shared layers.
            assert_eq!(other, &p.tensor, "{}", p.name);
        }
        assert!(store.names().filter(|n| !base.contains(n)).all(|n| n.starts_with("nlce")));
    }
}

#[test]
fn checkpoint_shape_mismatch_is_named() {
    let full = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let base = Nlcen::new(small(Variant::NoNlce, 32)).unwrap();
    let err = full.check_params(&base.init(0).unwrap()).unwrap_err().to_string();
    assert!(err.contains("missing nlce2.theta"), "{err}");
    let err = base.check_params(&full.init(0).unwrap()).unwrap_err().to_string();
    assert!(err.contains("unexpected nlce"), "{err}");
}

#[test]
fn no_nlce_passes_stage_maps_through() {
    let net = Nlcen::new(small(Variant::NoNlce, 32)).unwrap();
    let params = net.init(0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(image(1, 1, 32));
    let f = net.features(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
    assert_eq!(f.c.map(|v| v.id()), f.e.map(|v| v.id()));
}

#[test]
fn full_variant_delegates_to_the_module() {
    let cfg = small(Variant::Full, 32);
    let net = Nlcen::new(cfg.clone()).unwrap();
    let mut params = net.init(5).unwrap();
    perturb(&mut params, 0.3);
    let mut g = Graph::new();
    let x = g.constant(image(1, 1, 32));
    let f = net.features(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
    for (i, &ch) in cfg.stage_channels.iter().enumerate() {
        let nlce = Nlce::new(format!("nlce{}", i + 2), NlceConfig::new(ch).with_codewords(3), NlceParts::Full);
        let direct = nlce.forward(&mut g, &params, f.c[i], ForwardCtx::EVAL).unwrap();
        assert_eq!(g.value(direct).data(), g.value(f.e[i]).data());
    }
}

#[test]
fn no_nl_variant_is_encode_then_scale() {
    let net = Nlcen::new(small(Variant::NoNl, 32)).unwrap();
    let mut params = net.init(5).unwrap();
    perturb(&mut params, 0.3);
    let mut g = Graph::new();
    let x = g.constant(image(1, 1, 32));
    let f = net.features(&mut g, &params, x, ForwardCtx::EVAL).unwrap();
    // Stage conv3: C = 3, 4×4 positions.
    let c3 = to_map(g.value(f.c[1]), 0);
    let rows: Mat = (0..16).map(|i| (0..3).map(|c| c3[c][i / 4][i % 4]).collect()).collect();
    let proj = mat(&params, "nlce3.proj");
    let zp: Mat = rows.iter().map(|z| apply(&proj, z)).collect();
    let (_, agg) = residuals(&zp, &mat(&params, "nlce3.codebook"), &vector(&params, "nlce3.smoothing"));
    let e = bn_relu_sum(&agg, &params, "nlce3", false);
    let gamma: Vec<f64> = apply(&mat(&params, "nlce3.gamma"), &e).into_iter().map(sigmoid).collect();
    let expect: Map = c3.iter().zip(&gamma).map(|(p, s)| p.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()).collect();
    assert!(max_diff(g.value(f.e[1]).data(), &flat(&expect)) < 1e-12);
}

fn pyramid_oracle(e: &[Map; 4], params: &ParamStore) -> [Map; 4] {
    let top = conv(&e[3], params, "fpn.top", 1, true);
    let mut p = [top.clone(), top.clone(), top.clone(), top];
    for i in (0..3).rev() {
        let lat = conv(&e[i], params, &format!("fpn.lateral{}", i + 2), 1, true);
        let up = resize(&p[i + 1], lat[0].len(), lat[0][0].len());
        p[i] = add(&lat, &up);
    }
    p
}

#[test]
fn pyramid_matches_scalar_recomputation() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let mut params = net.init(9).unwrap();
    perturb(&mut params, 0.5);
    let mut g = Graph::new();
    let e: Vec<Var> = [(2, 8), (3, 4), (4, 2), (5, 1)]
        .iter()
        .map(|&(c, s)| g.constant(Tensor::from_fn([1, c, s, s], |i| (i as f64 * 0.61 + c as f64).sin())))
        .collect();
    let e: [Var; 4] = e.try_into().unwrap();
    let p = net.build_pyramid(&mut g, &params, e).unwrap();
    let maps = e.map(|v| to_map(g.value(v), 0));
    let expect = pyramid_oracle(&maps, &params);
    for i in 0..4 {
        assert_eq!(g.shape(p[i])[1], 4);
        assert!(max_diff(g.value(p[i]).data(), &flat(&expect[i])) < 1e-12, "P{}", i + 2);
    }
}

#[test]
fn pyramid_of_zero_features_is_zero() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let params = net.init(9).unwrap();
    let mut g = Graph::new();
    let e = [(2, 8), (3, 4), (4, 2), (5, 1)].map(|(c, s)| g.constant(Tensor::zeros([1, c, s, s])));
    let p = net.build_pyramid(&mut g, &params, e).unwrap();
    assert!(p.iter().all(|&v| g.value(v).data().iter().all(|&x| x == 0.0)));
}

#[test]
fn pyramid_bottom_is_upsampled_top_when_laterals_are_silent() {
    let net = Nlcen::new(small(Variant::Full, 64)).unwrap();
    let params = net.init(9).unwrap();
    let mut g = Graph::new();
    let e5 = g.constant(Tensor::from_fn([1, 5, 2, 2], |i| i as f64 - 7.0));
    let zeros = [(2, 16), (3, 8), (4, 4)].map(|(c, s)| g.constant(Tensor::zeros([1, c, s, s])));
    let p = net.build_pyramid(&mut g, &params, [zeros[0], zeros[1], zeros[2], e5]).unwrap();
    let p5 = to_map(g.value(p[3]), 0);
    let thrice = resize(&resize(&resize(&p5, 4, 4), 8, 8), 16, 16);
    assert!(max_diff(g.value(p[0]).data(), &flat(&thrice)) < 1e-12);
}

#[test]
fn level_head_matches_conv_then_resize() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let mut params = net.init(2).unwrap();
    perturb(&mut params, 0.4);
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_fn([1, 4, 4, 4], |i| (i as f64 * 0.29).cos()));
    let out = net.predict_level(&mut g, &params, 4, p, 32).unwrap();
    let expect = resize(&conv(&to_map(g.value(p), 0), &params, "head4", 1, true), 32, 32);
    assert!(max_diff(g.value(out).data(), &flat(&expect)) < 1e-12);
}

#[test]
fn level_head_of_constant_map_is_constant_inside() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let mut params = net.init(2).unwrap();
    perturb(&mut params, 0.4);
    let mut g = Graph::new();
    let p = g.constant(Tensor::full([1, 4, 8, 8], 0.7));
    let out = net.predict_level(&mut g, &params, 2, p, 8).unwrap();
    let m = to_map(g.value(out), 0);
    for plane in &m {
        let v = plane[1][1];
        assert!(plane[1..7].iter().all(|r| r[1..7].iter().all(|&x| (x - v).abs() < 1e-12)));
    }
    let one = g.constant(Tensor::from_fn([1, 4, 1, 1], |i| i as f64));
    let out = net.predict_level(&mut g, &params, 5, one, 32).unwrap();
    for plane in to_map(g.value(out), 0) {
        assert!(plane.iter().flatten().all(|&x| x == plane[0][0]));
    }
}

fn bottleneck_oracle(x: &Map, params: &ParamStore, name: &str) -> Map {
    let y = conv_bn(x, params, &format!("{name}.reduce"), 1, true);
    let y = conv_bn(&y, params, &format!("{name}.mid"), 1, true);
    let y = conv_bn(&y, params, &format!("{name}.restore"), 1, false);
    relu(&add(&y, x))
}

#[test]
fn refinement_matches_scalar_recomputation() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let mut params = net.init(4).unwrap();
    perturb(&mut params, 0.5);
    let mut g = Graph::new();
    let p = [8, 4, 2, 1].map(|s| g.constant(Tensor::from_fn([1, 4, s, s], |i| (i as f64 * 0.41 + s as f64).sin())));
    let out = net.refine(&mut g, &params, p, 32, ForwardCtx::EVAL).unwrap();

    let mut fused: Map = Vec::new();
    for (i, &v) in p.iter().enumerate() {
        let mut h = to_map(g.value(v), 0);
        for b in 0..i {
            h = bottleneck_oracle(&h, &params, &format!("refine.p{}.b{b}", i + 2));
        }
        fused.extend(resize(&h, 8, 8));
    }
    assert_eq!(fused.len(), 16);
    assert_eq!(params.tensor("refine.fuse.weight").unwrap().shape(), &[2, 16, 3, 3]);
    let expect = resize(&conv(&fused, &params, "refine.fuse", 1, true), 32, 32);
    assert!(max_diff(g.value(out).data(), &flat(&expect)) < 1e-12);
}

#[test]
fn refinement_of_zero_pyramid_is_zero() {
    let net = Nlcen::new(small(Variant::Full, 32)).unwrap();
    let params = net.init(4).unwrap();
    let mut g = Graph::new();
    let p = [8, 4, 2, 1].map(|s| g.constant(Tensor::zeros([1, 4, s, s])));
    let out = net.refine(&mut g, &params, p, 32, ForwardCtx::EVAL).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

fn loss_of(logits: Tensor, mask: &[u8]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = seg_loss(&mut g, l, &[mask]).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn uniform_logits_cost_ln2() {
    let l = loss_of(Tensor::zeros([1, 2, 3, 3]), &[0, 1, 0, 1, 1, 0, 0, 0, 1]);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let mask = [0u8, 1, 1, 0];
    let logits = Tensor::from_fn([1, 2, 2, 2], |i| {
        let (c, p) = (i / 4, i % 4);
        if c == mask[p] as usize { 40.0 } else { -40.0 }
    });
    let l = loss_of(logits, &mask);
    assert!((0.0..1e-6).contains(&l), "{l}");
}

#[test]
fn two_by_two_loss_matches_hand_computation() {
    let bg: [f64; 4] = [0.5, -1.0, 2.0, 0.0];
    let fg: [f64; 4] = [1.5, 0.25, -0.5, 0.0];
    let mask = [1u8, 0, 0, 1];
    let mut expect = 0.0;
    for i in 0..4 {
        let (a, b) = (bg[i], fg[i]);
        let z: f64 = a.exp() + b.exp();
        let p = if mask[i] == 1 { b.exp() / z } else { a.exp() / z };
        expect -= p.ln();
    }
    expect /= 4.0;
    let logits = Tensor::new([1, 2, 2, 2], [bg, fg].concat()).unwrap();
    assert!((loss_of(logits, &mask) - expect).abs() < 1e-14);
}

#[test]
fn loss_rejects_non_binary_masks() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros([1, 2, 1, 2]));
    assert!(matches!(seg_loss(&mut g, l, &[&[0, 2]]), Err(nlcen::Error::NonBinaryMask { value: 2, index: 1 })));
    assert!(seg_loss(&mut g, l, &[&[0, 1, 1]]).is_err());
}

#[test]
fn total_loss_weights_are_a_quarter() {
    assert_eq!(total_loss_value([1.0; 4], 2.0), 1.5);
    assert_eq!(total_loss_value([0.0; 4], 0.0), 0.0);
    assert!((total_loss_value([0.1, 0.2, 0.3, 0.4], 1.0) - 0.5).abs() < 1e-15);
    let mut g = Graph::new();
    let lv = [0.1, 0.2, 0.3, 0.4].map(|v| g.constant(Tensor::scalar(v)));
    let r = g.constant(Tensor::scalar(1.0));
    let t = total_loss(&mut g, lv, r).unwrap();
    assert!((g.value(t).item().unwrap() - 0.5).abs() < 1e-15);
}

fn end_to_end_check(ctx: ForwardCtx) {
    let cfg = ModelConfig {
        input_hw: 32,
        stage_channels: [2, 2, 2, 2],
        pyramid_width: 2,
        codewords: 2,
        ..ModelConfig::default()
    };
    let net = Nlcen::new(cfg).unwrap();
    let mut params = net.init(21).unwrap();
    perturb(&mut params, 0.2);
    let names: Vec<String> = params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let mask: Vec<u8> = (0..32 * 32).map(|i| u8::from((i / 32 + i % 32) % 7 < 3)).collect();
    let masks = [mask.as_slice(), mask.as_slice()];
    let mut inputs = vec![image(2, 1, 32)];
    inputs.extend(names.iter().map(|n| params.tensor(n).unwrap().clone()));
    let report = grad_check(
        |g, v| {
            for (n, &var) in names.iter().zip(&v[1..]) {
                g.bind_param(n, var);
            }
            let wrap = |e: nlcen::Error| TensorError::Invalid(e.to_string());
            let out = net.forward(g, &params, v[0], ctx).map_err(wrap)?;
            training_loss(g, &out, &masks).map_err(wrap)
        },
        &inputs,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn end_to_end_gradients_in_inference_mode() {
    end_to_end_check(ForwardCtx::EVAL);
}

#[test]
fn end_to_end_gradients_with_batch_statistics() {
    end_to_end_check(ForwardCtx::TRAIN);
}
