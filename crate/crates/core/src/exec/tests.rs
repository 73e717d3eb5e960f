use super::*;
use crate::bitmap::BitTensor3;
use crate::data::ClassSubset;
use crate::distill::LayerPlan;
use crate::model::{LayerKind, LayerSpec};
use crate::tensor::{Dense, FilterBank, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lim: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
}

fn conv(rng: &mut ChaCha8Rng, name: &str, m: usize, n: usize, k: usize, s: usize, pad: usize) -> LayerSpec {
    let w = uniform(rng, m * n * k * k, 1.0);
    let b = uniform(rng, m, 0.3);
    LayerSpec::new(
        name,
        LayerKind::Conv {
            filters: FilterBank::new(m, n, k, s, w, b).unwrap(),
            padding: pad,
        },
    )
}

/// Small model with randomized geometry. `conv → [relu] → [pool] → conv → [relu] → fc → softmax`.
fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let c = rng.gen_range(1..=3);
    let hw = rng.gen_range(5..=9);
    let mut layers = Vec::new();
    let (m1, k1, s1) = (rng.gen_range(1..=5), rng.gen_range(1..=3), rng.gen_range(1..=2));
    let p1 = rng.gen_range(0..=k1 / 2);
    layers.push(conv(rng, "c1", m1, c, k1, s1, p1));
    let mut side = (hw + 2 * p1 - k1) / s1 + 1;
    if rng.gen_bool(0.8) {
        layers.push(LayerSpec::new("r1", LayerKind::Relu));
    }
    if side >= 4 && rng.gen_bool(0.5) {
        layers.push(LayerSpec::new("p1", LayerKind::MaxPool { window: 2, stride: 2 }));
        side = (side - 2) / 2 + 1;
    }
    let (m2, k2) = (rng.gen_range(1..=5), rng.gen_range(1..=3.min(side)));
    let p2 = rng.gen_range(0..=k2 / 2);
    layers.push(conv(rng, "c2", m2, m1, k2, 1, p2));
    let side2 = side + 2 * p2 - k2 + 1;
    if rng.gen_bool(0.8) {
        layers.push(LayerSpec::new("r2", LayerKind::Relu));
    }
    let inputs = m2 * side2 * side2;
    let dense = Dense::new(inputs, 3, uniform(rng, inputs * 3, 0.5), uniform(rng, 3, 0.2)).unwrap();
    layers.push(LayerSpec::new("fc", LayerKind::FullyConnected(dense)));
    layers.push(LayerSpec::new("prob", LayerKind::Softmax));
    Model::new(Shape3::new(c, hw, hw), layers, vec!["a".into(), "b".into(), "c".into()]).unwrap()
}

fn random_plan(rng: &mut ChaCha8Rng, model: &Model) -> RemovalPlan {
    let layers = model
        .conv_shapes()
        .iter()
        .map(|s| {
            let density = [0.0, 0.3, 0.7, 1.0][rng.gen_range(0..4)];
            let removed: Vec<bool> = (0..s.m()).map(|_| rng.gen_bool(0.3)).collect();
            let bits = BitTensor3::from_fn(s.output, |c, _, _| !removed[c] && rng.gen_bool(density));
            LayerPlan::new(s.name.clone(), bits, 0.0)
        })
        .collect();
    RemovalPlan::new(ClassSubset::all(3), layers)
}

fn random_input(rng: &mut ChaCha8Rng, shape: Shape3) -> Tensor3 {
    Tensor3::from_fn(shape, |_, _, _| {
        if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen_range(-1.0..1.0)
        }
    })
}

/// Naive direct convolution summed in ascending `K·(n·K + i) + j`, bias last.
fn naive_conv(x: &Tensor3, fb: &FilterBank, pad: usize) -> Tensor3 {
    let (k, s) = (fb.kernel(), fb.stride());
    let (ho, wo) = fb.output_dims(x.height(), x.width(), pad).unwrap();
    let w = fb.weights();
    Tensor3::from_fn(Shape3::new(fb.out_channels(), ho, wo), |m, y, xo| {
        let mut acc = 0.0f32;
        for n in 0..fb.in_channels() {
            for i in 0..k {
                for j in 0..k {
                    let (r, c) = (
                        (y * s + i) as isize - pad as isize,
                        (xo * s + j) as isize - pad as isize,
                    );
                    let v = if r < 0 || c < 0 || r as usize >= x.height() || c as usize >= x.width() {
                        0.0
                    } else {
                        x.get(n, r as usize, c as usize)
                    };
                    acc += w[((m * fb.in_channels() + n) * k + i) * k + j] * v;
                }
            }
        }
        acc + fb.biases()[m]
    })
}

/// Dense forward, then every clear bit of the plan zeroes its stage output.
fn masked_dense_oracle(model: &Model, plan: &RemovalPlan, input: &Tensor3) -> Vec<f32> {
    let layers = model.layers();
    let mut x = input.clone();
    let mut conv_idx = 0;
    let mut i = 0;
    while i < layers.len() {
        match &layers[i].kind {
            LayerKind::Conv { filters, padding } => {
                x = naive_conv(&x, filters, *padding);
                if matches!(layers.get(i + 1).map(|l| &l.kind), Some(LayerKind::Relu)) {
                    x = crate::tensor::relu(&x);
                    i += 1;
                }
                let bits = plan.layers()[conv_idx].bitmap();
                for (idx, v) in x.data_mut().iter_mut().enumerate() {
                    if !bits.get_linear(idx) {
                        *v = 0.0;
                    }
                }
                conv_idx += 1;
            }
            LayerKind::Relu => x = crate::tensor::relu(&x),
            LayerKind::MaxPool { window, stride } => x = crate::tensor::maxpool(&x, *window, *stride).unwrap(),
            LayerKind::FullyConnected(d) => {
                let out: Vec<f32> = (0..d.outputs())
                    .map(|o| {
                        let row = &d.weights()[o * d.inputs()..(o + 1) * d.inputs()];
                        let mut acc = 0.0f32;
                        for (w, v) in row.iter().zip(x.data()) {
                            acc += w * v;
                        }
                        acc + d.biases()[o]
                    })
                    .collect();
                x = Tensor3::from_vec(Shape3::new(out.len(), 1, 1), out).unwrap();
            }
            LayerKind::Softmax => {}
        }
        i += 1;
    }
    x.into_data()
}

fn bits_of(v: &[f32]) -> Vec<u32> {
    v.iter().map(|f| f.to_bits()).collect()
}

#[test]
fn distilled_forward_equals_masked_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let model = random_model(&mut rng);
        let plan = random_plan(&mut rng, &model);
        let input = random_input(&mut rng, model.input_shape());
        let out = forward_distilled(&model, &plan, &input).unwrap();
        assert_eq!(
            bits_of(&out.logits),
            bits_of(&masked_dense_oracle(&model, &plan, &input)),
            "trial {trial}"
        );
        assert_eq!(
            out.macs,
            plan_cost(&model, &plan).unwrap().performed_macs,
            "trial {trial}"
        );
    }
}

#[test]
fn all_ones_plan_is_the_dense_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let model = random_model(&mut rng);
        let plan = RemovalPlan::all_ones(&model, ClassSubset::all(3));
        let input = random_input(&mut rng, model.input_shape());
        let out = forward_distilled(&model, &plan, &input).unwrap();
        assert_eq!(
            bits_of(&out.logits),
            bits_of(&model.forward(&input, false).unwrap().logits)
        );
        assert_eq!(out.macs, model.flop_count() / 2);
        assert_eq!(forward_dense(&model, &input).unwrap(), out);
        let cost = plan_cost(&model, &plan).unwrap();
        assert_eq!(cost.skipped_macs(), 0);
        assert!(cost.layers.iter().all(|l| l.compression_ratio == 1.0));
    }
}

#[test]
fn all_zeros_plan_feeds_zeros_to_the_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = random_model(&mut rng);
    let layers = model
        .conv_shapes()
        .iter()
        .map(|s| LayerPlan::new(s.name.clone(), BitTensor3::zeros(s.output), 1.0))
        .collect();
    let plan = RemovalPlan::new(ClassSubset::all(3), layers);
    let out = forward_distilled(&model, &plan, &random_input(&mut rng, model.input_shape())).unwrap();
    let LayerKind::FullyConnected(fc) = &model.layers()[model.layers().len() - 2].kind else {
        panic!("classifier expected");
    };
    assert_eq!(out.logits, fc.biases());
    // Only the classifier would run, and it reads nothing.
    assert_eq!(out.macs, 0);
    let cost = plan_cost(&model, &plan).unwrap();
    assert_eq!(cost.ideal_speedup(), f64::INFINITY);
    let report = CompressionReport::new(ClassSubset::all(3), cost);
    assert!(report.has_infinite_ratio());
    assert!(report.to_key_values().contains("compression_ratio=inf"));
}

#[test]
fn removing_one_channel_saves_both_layer_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let layers = vec![
        conv(&mut rng, "c1", 4, 2, 3, 1, 1),
        LayerSpec::new("r1", LayerKind::Relu),
        conv(&mut rng, "c2", 5, 4, 3, 1, 1),
        LayerSpec::new("r2", LayerKind::Relu),
        LayerSpec::new(
            "fc",
            LayerKind::FullyConnected(Dense::new(5 * 36, 2, vec![0.1; 360], vec![0.0; 2]).unwrap()),
        ),
        LayerSpec::new("prob", LayerKind::Softmax),
    ];
    let model = Model::new(Shape3::new(2, 6, 6), layers, vec!["a".into(), "b".into()]).unwrap();
    let shapes = model.conv_shapes();
    let input = random_input(&mut rng, model.input_shape());
    let full = RemovalPlan::all_ones(&model, ClassSubset::all(2));
    let dense = forward_distilled(&model, &full, &input).unwrap().macs;

    let mut bits = BitTensor3::ones(shapes[0].output);
    for y in 0..6 {
        for x in 0..6 {
            bits.set(2, y, x, false);
        }
    }
    let one_gone = RemovalPlan::new(
        ClassSubset::all(2),
        vec![LayerPlan::new("c1", bits, 0.0), full.layers()[1].clone()],
    );
    let (here, next) = skipped_macs(&shapes[0], Some(&shapes[1]), 1);
    assert_eq!(
        dense - forward_distilled(&model, &one_gone, &input).unwrap().macs,
        here + next
    );
    let cost = plan_cost(&model, &one_gone).unwrap();
    assert_eq!((cost.layers[0].skipped_here, cost.layers[0].skipped_next), (here, next));

    // In the last conv layer the savings land in the classifier.
    let mut bits = BitTensor3::ones(shapes[1].output);
    for y in 0..6 {
        for x in 0..6 {
            bits.set(4, y, x, false);
        }
    }
    let last_gone = RemovalPlan::new(
        ClassSubset::all(2),
        vec![full.layers()[0].clone(), LayerPlan::new("c2", bits, 0.0)],
    );
    let (here, none) = skipped_macs(&shapes[1], None, 1);
    assert_eq!(none, 0);
    assert_eq!(
        dense - forward_distilled(&model, &last_gone, &input).unwrap().macs,
        here + 36 * 2
    );
}

#[test]
fn compression_ratio_matches_counted_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let model = random_model(&mut rng);
        let plan = random_plan(&mut rng, &model);
        let cost = plan_cost(&model, &plan).unwrap();
        for (l, lp) in cost.layers.iter().zip(plan.layers()) {
            let ones = lp.bitmap().count_ones();
            let expected = if ones == 0 {
                f64::INFINITY
            } else {
                lp.bitmap().len() as f64 / ones as f64
            };
            assert_eq!(l.compression_ratio, expected);
        }
        let parts: u64 = cost.layers.iter().map(|l| l.skipped_here + l.skipped_next).sum();
        assert_eq!(parts, cost.skipped_macs());
        assert!(cost.skipped_macs() <= cost.total_macs);
    }
}

#[test]
fn mismatched_plan_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = random_model(&mut rng);
    let plan = RemovalPlan::new(ClassSubset::all(3), vec![]);
    let x = random_input(&mut rng, a.input_shape());
    assert!(matches!(forward_distilled(&a, &plan, &x), Err(Error::PlanMismatch(_))));
    assert!(matches!(plan_cost(&a, &plan), Err(Error::PlanMismatch(_))));
}

#[test]
fn benchmark_of_all_ones_plan_is_near_parity() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let layers = vec![
        conv(&mut rng, "c1", 8, 1, 3, 1, 1),
        LayerSpec::new("r1", LayerKind::Relu),
        conv(&mut rng, "c2", 8, 8, 3, 1, 1),
        LayerSpec::new("r2", LayerKind::Relu),
        LayerSpec::new(
            "fc",
            LayerKind::FullyConnected(Dense::new(8 * 256, 2, vec![0.01; 4096], vec![0.0; 2]).unwrap()),
        ),
        LayerSpec::new("prob", LayerKind::Softmax),
    ];
    let model = Model::new(Shape3::new(1, 16, 16), layers, vec!["a".into(), "b".into()]).unwrap();
    let plan = RemovalPlan::all_ones(&model, ClassSubset::all(2));
    let inputs: Vec<Tensor3> = (0..20).map(|_| random_input(&mut rng, model.input_shape())).collect();
    assert!(benchmark(&model, &plan, &inputs, 2).is_err());
    assert!(benchmark(&model, &plan, &[], 3).is_err());
    let r = benchmark(&model, &plan, &inputs, 5).unwrap();
    assert!((0.6..1.6).contains(&r.speedup()), "speedup {}", r.speedup());
    let mut report = CompressionReport::new(ClassSubset::all(2), plan_cost(&model, &plan).unwrap());
    report.timing = Some(r);
    report.accuracy = Some((0.9, 0.9));
    let text = report.to_text();
    assert!(text.contains("1.000X") && text.contains("speedup:"));
    let kv = report.to_key_values();
    assert!(kv.lines().all(|l| l.split_once('=').is_some()));
    assert!(kv.contains("layer.c2.compression_ratio=1.000"));
}
