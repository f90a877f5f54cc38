mod common;

use mobilefacenet::analysis::{count_params, importance_map, model_cost, receptive_field};
use mobilefacenet::arch::{build_model, shape_propagate, ArchSpec, Layer, LayerDesc, LayerKind, Model, Node, Resolution, Variant};
use mobilefacenet::ops::{
    conv2d_forward, conv2d_forward_reference, depthwise_conv2d_forward, gdconv_forward, ConvParams,
    DepthwiseConvParams, GDConvParams,
};
use mobilefacenet::pipeline::{
    decode_model, embed_tensor, encode_model, fold_batchnorm, kfold_accuracy, tar_at_far, tar_points,
};
use mobilefacenet::{Rng, Tensor};
use proptest::prelude::*;

use common::*;

fn small_arch(variant: Variant, input: Resolution, divisor: usize) -> ArchSpec {
    ArchSpec::mobilefacenet(variant, input).unwrap().with_width_divisor(divisor).unwrap()
}

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn resolution_strategy() -> impl Strategy<Value = Resolution> {
    prop::sample::select(Resolution::SUPPORTED.to_vec())
}

fn combine(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Tensor {
    let data = x.data().iter().zip(y.data()).map(|(&u, &v)| a * u + b * v).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn assert_linear(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, y: &Tensor, a: f32, b: f32) -> Result<(), TestCaseError> {
    let lhs = f(&combine(a, x, b, y));
    let rhs = combine(a, &f(x), b, &f(y));
    let d = lhs.max_abs_diff(&rhs).unwrap();
    prop_assert!(d < 1e-5, "linearity violated by {d}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_ops_are_linear(
        seed in any::<u64>(),
        c in 1usize..4,
        h in 3usize..7,
        w in 3usize..7,
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
        stride in 1usize..3,
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::rand_normal(&[2, c, h, w], 0.0, 1.0, &mut rng).unwrap();
        let y = Tensor::rand_normal(&[2, c, h, w], 0.0, 1.0, &mut rng).unwrap();
        let conv = ConvParams::new(Tensor::rand_normal(&[3, c, 3, 3], 0.0, 0.3, &mut rng).unwrap(), (stride, stride), (1, 1)).unwrap();
        let dw = DepthwiseConvParams::new(Tensor::rand_normal(&[c, 1, 3, 3], 0.0, 0.3, &mut rng).unwrap(), (stride, stride), (1, 1)).unwrap();
        let gd = GDConvParams::new(Tensor::rand_normal(&[c, 1, h, w], 0.0, 0.3, &mut rng).unwrap()).unwrap();
        assert_linear(|t| conv2d_forward(t, &conv).unwrap(), &x, &y, a, b)?;
        assert_linear(|t| depthwise_conv2d_forward(t, &dw).unwrap(), &x, &y, a, b)?;
        assert_linear(|t| gdconv_forward(t, &gd).unwrap(), &x, &y, a, b)?;
    }

    #[test]
    fn conv_output_follows_floor_formula(
        seed in any::<u64>(),
        cin in 1usize..4,
        cout in 1usize..4,
        h in 1usize..9,
        w in 1usize..9,
        kh in 1usize..4,
        kw in 1usize..4,
        sh in 1usize..3,
        sw in 1usize..3,
        ph in 0usize..2,
        pw in 0usize..2,
    ) {
        prop_assume!(h + 2 * ph >= kh && w + 2 * pw >= kw);
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::rand_normal(&[1, cin, h, w], 0.0, 1.0, &mut rng).unwrap();
        let p = ConvParams::new(Tensor::rand_normal(&[cout, cin, kh, kw], 0.0, 1.0, &mut rng).unwrap(), (sh, sw), (ph, pw)).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        prop_assert_eq!(y.shape(), &[1, cout, oh, ow][..]);
        let r = conv2d_forward_reference(&x, &p).unwrap();
        prop_assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_gdconv_is_mean(seed in any::<u64>(), c in 1usize..5, h in 1usize..8, w in 1usize..8) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::rand_normal(&[2, c, h, w], 0.0, 1.0, &mut rng).unwrap();
        let k = 1.0 / (h * w) as f64;
        let y = gdconv_forward(&x, &GDConvParams::new(Tensor::new(&[c, 1, h, w], k).unwrap()).unwrap()).unwrap();
        let x32 = x.cast::<f32>();
        let y32 = gdconv_forward(&x32, &GDConvParams::new(Tensor::new(&[c, 1, h, w], k as f32).unwrap()).unwrap()).unwrap();
        for (plane, (&g, &g32)) in x.data().chunks(h * w).zip(y.data().iter().zip(y32.data())) {
            let mean = plane.iter().sum::<f64>() / (h * w) as f64;
            prop_assert!((g - mean).abs() < 1e-12);
            prop_assert!((g32 as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn importance_is_channel_norm(seed in any::<u64>(), c in 1usize..6, h in 1usize..8, w in 1usize..8) {
        let mut rng = Rng::new(seed);
        let k = Tensor::<f64>::rand_normal(&[c, 1, h, w], 0.0, 1.0, &mut rng).unwrap();
        let map = importance_map(&GDConvParams::new(k.clone()).unwrap());
        for i in 0..h {
            for j in 0..w {
                let want = (0..c).map(|m| k.get(&[m, 0, i, j]).powi(2)).sum::<f64>().sqrt();
                prop_assert_eq!(map.get(i, j), want);
            }
        }
    }
}

fn bn_layers<T: mobilefacenet::Scalar>(nodes: &[Node<T>]) -> usize {
    nodes
        .iter()
        .map(|n| match &n.layer {
            Layer::BatchNorm(_) => 1,
            Layer::Block(b) => bn_layers(&b.nodes),
            _ => 0,
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn folding_preserves_outputs(seed in any::<u64>(), variant in variant_strategy(), input in resolution_strategy()) {
        let mut rng = Rng::new(seed);
        let mut model: Model = build_model(&small_arch(variant, input, 8), &mut rng).unwrap();
        randomize_bn(&mut model, &mut rng);
        let folded = fold_batchnorm(&model).unwrap();
        prop_assert_eq!(bn_layers(folded.nodes()), 0);
        let x: Tensor = image_range_input(2, input.height, input.width, &mut rng);
        let d = model.forward(&x).unwrap().max_abs_diff(&folded.forward(&x).unwrap()).unwrap();
        prop_assert!(d < 1e-4, "fold changed outputs by {d}");
    }

    #[test]
    fn model_file_round_trip(seed in any::<u64>(), variant in variant_strategy(), fold in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let mut model: Model = build_model(&small_arch(variant, Resolution::R112X96, 8), &mut rng).unwrap();
        randomize_bn(&mut model, &mut rng);
        if fold {
            model = fold_batchnorm(&model).unwrap();
        }
        let back = decode_model(&encode_model(&model).unwrap()).unwrap();
        for ((ia, a), (ib, b)) in model.tensors().into_iter().zip(back.tensors()) {
            prop_assert_eq!(ia.name, ib.name);
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
        let x = Tensor::rand_normal(&[1, 3, 112, 96], 0.0, 1.0, &mut rng).unwrap();
        let ea = embed_tensor(&model, &x, false).unwrap();
        let eb = embed_tensor(&back, &x, false).unwrap();
        prop_assert_eq!(ea, eb);
    }

    #[test]
    fn normalized_embedding_has_unit_norm(seed in any::<u64>(), variant in variant_strategy()) {
        let mut rng = Rng::new(seed);
        let model: Model = build_model(&small_arch(variant, Resolution::R96X96, 8), &mut rng).unwrap();
        let x = Tensor::rand_normal(&[1, 3, 96, 96], 0.0, 1.0, &mut rng).unwrap();
        let e = embed_tensor(&model, &x, true).unwrap();
        prop_assert!((e.norm() - 1.0).abs() < 1e-5);
        prop_assert!(e.values.iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tar_non_decreasing_in_far(seed in any::<u64>(), n in 20usize..300) {
        let mut rng = Rng::new(seed);
        let (scores, same) = random_scores(n, &mut rng);
        prop_assume!(same.iter().any(|&s| s) && same.iter().any(|&s| !s));
        let (g, i) = split(&scores, &same);
        let fars = [1e-4, 1e-3, 0.01, 0.05, 0.1, 0.3, 0.5, 0.9, 1.0];
        let mut last = -1.0;
        for far in fars {
            let (tar, _) = tar_at_far(&g, &i, far).unwrap();
            prop_assert!(tar >= last);
            last = tar;
        }
        let pts = tar_points(&same, &scores, &fars).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[0].tar <= w[1].tar));
    }

    #[test]
    fn kfold_invariant_to_monotone_transform(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (scores, same) = random_scores(400, &mut rng);
        let Ok(r) = kfold_accuracy(&same, &scores, 10) else { return Ok(()); };
        let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + s * s * s).collect();
        let w = kfold_accuracy(&same, &warped, 10).unwrap();
        prop_assert_eq!(r.mean_accuracy, w.mean_accuracy);
        for (a, b) in r.folds.iter().zip(&w.folds) {
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>(), far in 0.0005f64..1.0) {
        let mut rng = Rng::new(seed);
        let (scores, same) = random_scores(200, &mut rng);
        let (g, i) = split(&scores, &same);
        prop_assume!(!g.is_empty() && !i.is_empty());
        prop_assert_eq!(tar_at_far(&g, &i, far).unwrap(), brute_tar(&g, &i, far));
        if let Ok(r) = kfold_accuracy(&same, &scores, 10) {
            let oracle = brute_kfold(&scores, &same, 10);
            for (f, (t, a)) in r.folds.iter().zip(oracle) {
                prop_assert_eq!(f.threshold, t);
                prop_assert_eq!(f.accuracy, a);
            }
        }
    }
}

#[test]
fn every_variant_and_resolution_gives_finite_embeddings() {
    let mut rng = Rng::new(11);
    for v in Variant::ALL {
        for r in Resolution::SUPPORTED {
            let arch = ArchSpec::mobilefacenet(v, r).unwrap();
            let model: Model = build_model(&arch, &mut rng).unwrap();
            let x = Tensor::rand_normal(&[1, 3, r.height, r.width], 0.0, 1.0, &mut rng).unwrap();
            let y = model.forward(&x).unwrap();
            assert_eq!(y.shape(), &[1, arch.embedding_dim().unwrap(), 1, 1], "{v} @ {r}");
            assert!(y.is_finite(), "{v} @ {r}");
        }
    }
}

fn pointwise_channels<T: mobilefacenet::Scalar>(nodes: &[Node<T>]) -> (usize, usize) {
    let convs: Vec<&ConvParams<T>> = nodes
        .iter()
        .filter_map(|n| match &n.layer {
            Layer::Conv(p) => Some(p),
            _ => None,
        })
        .collect();
    (convs[0].in_channels(), convs[convs.len() - 1].out_channels())
}

#[test]
fn shortcut_iff_stride_one_and_same_width() {
    let mut rng = Rng::new(3);
    let mut blocks = 0;
    for v in Variant::ALL {
        for r in Resolution::SUPPORTED {
            let model: Model = build_model(&small_arch(v, r, 4), &mut rng).unwrap();
            for node in model.nodes() {
                let Layer::Block(b) = &node.layer else { continue };
                let stride = b
                    .nodes
                    .iter()
                    .find_map(|n| match &n.layer {
                        Layer::Depthwise(p) => Some(p.stride),
                        _ => None,
                    })
                    .unwrap();
                let (cin, cout) = pointwise_channels(&b.nodes);
                assert_eq!(b.shortcut, stride == (1, 1) && cin == cout, "{}", node.name);
                blocks += 1;
            }
        }
    }
    assert_eq!(blocks, 15 * 15);
}

type Sig = (LayerKind, (usize, usize), (usize, usize));

fn signature(layers: &[LayerDesc]) -> Vec<Sig> {
    layers.iter().map(|l| (l.kind, l.kernel, l.stride)).collect()
}

/// `big` equals `small` with one contiguous run of `removed` inserted.
fn differs_by(big: &[Sig], small: &[Sig], removed: &[LayerKind]) -> bool {
    if big.len() != small.len() + removed.len() {
        return false;
    }
    let k = big.iter().zip(small).take_while(|(a, b)| a == b).count();
    let run: Vec<LayerKind> = big[k..k + removed.len()].iter().map(|s| s.0).collect();
    run == removed
        && big[k].1 == (1, 1)
        && big[k + removed.len()..] == small[k..]
}

#[test]
fn variant_layer_differences() {
    for r in Resolution::SUPPORTED {
        let layers = |v| shape_propagate(&ArchSpec::mobilefacenet(v, r).unwrap()).unwrap();
        let (p, m, s) = (layers(Variant::Primary), layers(Variant::M), layers(Variant::S));
        assert!(differs_by(&signature(&p), &signature(&m), &[LayerKind::Conv, LayerKind::BatchNorm]));
        assert!(differs_by(
            &signature(&m),
            &signature(&s),
            &[LayerKind::Conv, LayerKind::BatchNorm, LayerKind::PRelu]
        ));
        assert_eq!(p[..m.len()], m[..]);
    }
}

#[test]
fn rf_grows_and_jump_multiplies() {
    for v in Variant::ALL {
        let rf = receptive_field(&ArchSpec::mobilefacenet(v, Resolution::R112X112).unwrap()).unwrap();
        let mut prev = (1, 1, 1, 1);
        for l in &rf.layers {
            assert!(l.h.rf >= prev.0 && l.w.rf >= prev.1, "{}", l.name);
            assert_eq!(l.h.jump, prev.2 * l.stride.0);
            assert_eq!(l.w.jump, prev.3 * l.stride.1);
            prev = (l.h.rf, l.w.rf, l.h.jump, l.w.jump);
        }
    }
}

#[test]
fn arch_and_materialized_counts_agree() {
    let mut rng = Rng::new(5);
    for v in Variant::ALL {
        for bn in [true, false] {
            let arch = ArchSpec::mobilefacenet(v, Resolution::R112X112).unwrap().with_bn_linear(bn);
            let model: Model = build_model(&arch, &mut rng).unwrap();
            let counted = count_params(&arch).unwrap().total_params as usize;
            assert_eq!(counted, model.num_params(), "{v} bn_linear={bn}");
            assert_eq!(model_cost(&model).unwrap().total_params as usize, counted);
        }
    }
}
