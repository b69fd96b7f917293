//! Central finite-difference checks for every backward pass, from single
//! kernels up to whole reduced-size networks. Each case panics on failure.
//! The including crate must declare `mod common`.

use chanatt_core::attention::{conv_attention_backward, conv_attention_forward, se_backward, se_forward, ConvAttentionParams, SeParams};
use chanatt_core::models::{
    build_mobilenet, build_resnet, Arch, InvertedResidualSetting, MobileNetLayout, ModelConfig, ModelGraph, ResNetLayout, ResNetStage,
};
use chanatt_core::tensor::*;
use chanatt_core::trainer::cross_entropy;
use chanatt_core::{AttentionKind, AttentionSpec};
use super::common::{check, project, random, rng, TRIALS};
use rand::Rng;

const TOL: f64 = 1e-4;

fn assert_within(op: &str, trial: u64, what: &str, err: f64, tol: f64) {
    assert!(err < tol, "{op} trial {trial}: {what} relative error {err:e} exceeds {tol:e}");
}

/// Moves values away from activation kinks so a ±ε probe never straddles one.
fn away_from(t: &Tensor, kinks: &[f64]) -> Tensor {
    t.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < 1e-3 {
                v = k + 1e-2;
            }
        }
        v
    })
}

pub fn conv2d_gradients() {
    let mut r = rng(1);
    for trial in 0..TRIALS {
        let groups = [1, 1, 2, 4][r.gen_range(0..4)];
        let cin = groups * r.gen_range(1..=2);
        let cout = groups * r.gen_range(1..=2);
        let k = [1, 2, 3][r.gen_range(0..3)];
        let spec = ConvSpec::square(cin, cout, k, r.gen_range(1..=2), r.gen_range(0..=1))
            .with_groups(groups)
            .with_bias(r.gen_bool(0.5));
        let (n, h, w) = (r.gen_range(1..=2), r.gen_range(3..=6), r.gen_range(3..=6));
        let x = random(&[n, cin, h, w], &mut r);
        let wt = random(&spec.weight_shape(), &mut r);
        let b = spec.has_bias.then(|| random(&[cout], &mut r));
        let y = conv2d_forward(&x, &wt, b.as_ref(), &spec).unwrap();
        let up = random(y.shape(), &mut r);
        let g = conv2d_backward(&x, &wt, &spec, &up).unwrap();

        let e = check(&x, &g.input, |x| project(&conv2d_forward(x, &wt, b.as_ref(), &spec).unwrap(), &up));
        assert_within("conv2d", trial, "input", e, TOL);
        let e = check(&wt, &g.weights, |w| project(&conv2d_forward(&x, w, b.as_ref(), &spec).unwrap(), &up));
        assert_within("conv2d", trial, "weights", e, TOL);
        if let Some(b) = &b {
            let e = check(b, g.bias.as_ref().unwrap(), |b| project(&conv2d_forward(&x, &wt, Some(b), &spec).unwrap(), &up));
            assert_within("conv2d", trial, "bias", e, TOL);
        } else {
            assert!(g.bias.is_none());
        }
    }
}

pub fn depthwise_conv_gradients() {
    let mut r = rng(2);
    for trial in 0..TRIALS {
        let c = r.gen_range(1..=4);
        let spec = ConvSpec::square(c, c, 3, r.gen_range(1..=2), 1).with_groups(c);
        let x = random(&[2, c, 5, 5], &mut r);
        let wt = random(&spec.weight_shape(), &mut r);
        let y = conv2d_forward(&x, &wt, None, &spec).unwrap();
        let up = random(y.shape(), &mut r);
        let g = conv2d_backward(&x, &wt, &spec, &up).unwrap();
        let e = check(&x, &g.input, |x| project(&conv2d_forward(x, &wt, None, &spec).unwrap(), &up));
        assert_within("depthwise", trial, "input", e, TOL);
        let e = check(&wt, &g.weights, |w| project(&conv2d_forward(&x, w, None, &spec).unwrap(), &up));
        assert_within("depthwise", trial, "weights", e, TOL);
    }
}

pub fn conv2d_reference_instance() {
    let mut r = rng(3);
    let spec = ConvSpec::square(2, 3, 3, 1, 1);
    let x = random(&[1, 2, 5, 5], &mut r);
    let wt = random(&spec.weight_shape(), &mut r);
    let up = Tensor::full(&[1, 3, 5, 5], 1.0);
    let g = conv2d_backward(&x, &wt, &spec, &up).unwrap();
    let e = check(&x, &g.input, |x| conv2d_forward(x, &wt, None, &spec).unwrap().sum());
    assert_within("conv2d 1x2x5x5", 0, "input", e, TOL);
    let e = check(&wt, &g.weights, |w| conv2d_forward(&x, w, None, &spec).unwrap().sum());
    assert_within("conv2d 1x2x5x5", 0, "weights", e, TOL);
}

pub fn batchnorm_gradients() {
    let mut r = rng(4);
    for trial in 0..TRIALS {
        let training = trial % 4 != 3;
        let (n, c, h, w) = (r.gen_range(2..=4), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(2..=3));
        let x = random(&[n, c, h, w], &mut r);
        let gamma = Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5));
        let beta = random(&[c], &mut r);
        let rm = random(&[c], &mut r);
        let rv = Tensor::from_fn(&[c], |_| r.gen_range(0.5..2.0));
        let fwd = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let (mut m, mut v) = (rm.clone(), rv.clone());
            batchnorm_forward(x, g, b, &mut m, &mut v, training, BN_MOMENTUM, BN_EPSILON).unwrap()
        };
        let up = random(x.shape(), &mut r);
        let g = batchnorm_backward(&x, &gamma, &rm, &rv, training, BN_EPSILON, &up).unwrap();
        let e = check(&x, &g.input, |x| project(&fwd(x, &gamma, &beta), &up));
        assert_within("batchnorm", trial, "input", e, TOL);
        let e = check(&gamma, &g.gamma, |gm| project(&fwd(&x, gm, &beta), &up));
        assert_within("batchnorm", trial, "gamma", e, TOL);
        let e = check(&beta, &g.beta, |b| project(&fwd(&x, &gamma, b), &up));
        assert_within("batchnorm", trial, "beta", e, TOL);
    }
}

pub fn activation_gradients() {
    let mut r = rng(5);
    for trial in 0..TRIALS {
        let shape = [r.gen_range(1..=3), r.gen_range(1..=4), 3, 3];
        let x = Tensor::from_fn(&shape, |_| r.gen_range(-8.0..8.0));
        let x = away_from(&x, &[0.0, 6.0]);
        let up = random(&shape, &mut r);

        let g = relu_backward(&x, &up).unwrap();
        assert_within("relu", trial, "input", check(&x, &g, |x| project(&relu_forward(x), &up)), TOL);
        let g = relu6_backward(&x, &up).unwrap();
        assert_within("relu6", trial, "input", check(&x, &g, |x| project(&relu6_forward(x), &up)), TOL);
        let g = sigmoid_backward(&sigmoid_forward(&x), &up).unwrap();
        assert_within("sigmoid", trial, "input", check(&x, &g, |x| project(&sigmoid_forward(x), &up)), TOL);
    }
}

pub fn sigmoid_backward_at_zero_is_quarter() {
    let x = Tensor::zeros(&[1, 1]);
    let g = sigmoid_backward(&sigmoid_forward(&x), &Tensor::full(&[1, 1], 1.0)).unwrap();
    assert_eq!(g.data(), &[0.25]);
    let numeric = (sigmoid(super::common::EPS) - sigmoid(-super::common::EPS)) / (2.0 * super::common::EPS);
    assert!((numeric - 0.25).abs() < 1e-10);
}

pub fn pooling_and_scaling_gradients() {
    let mut r = rng(6);
    for trial in 0..TRIALS {
        let (n, c, h, w) = (r.gen_range(1..=3), r.gen_range(1..=5), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = random(&[n, c, h, w], &mut r);

        let up = random(&[n, c], &mut r);
        let g = global_avg_pool_backward(x.shape(), &up).unwrap();
        let e = check(&x, &g, |x| project(&global_avg_pool(x).unwrap(), &up));
        assert_within("global_avg_pool", trial, "input", e, TOL);

        let s = Tensor::from_fn(&[n, c], |_| r.gen_range(0.05..0.95));
        let up = random(x.shape(), &mut r);
        let (gx, gs) = channel_scale_backward(&x, &s, &up).unwrap();
        let e = check(&x, &gx, |x| project(&channel_scale(x, &s).unwrap(), &up));
        assert_within("channel_scale", trial, "input", e, TOL);
        let e = check(&s, &gs, |s| project(&channel_scale(&x, s).unwrap(), &up));
        assert_within("channel_scale", trial, "scales", e, TOL);
    }
}

pub fn linear_gradients() {
    let mut r = rng(7);
    for trial in 0..TRIALS {
        let (n, cin, cout) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
        let x = random(&[n, cin], &mut r);
        let w = random(&[cout, cin], &mut r);
        let b = random(&[cout], &mut r);
        let up = random(&[n, cout], &mut r);
        let g = linear_backward(&x, &w, &up).unwrap();
        let e = check(&x, &g.input, |x| project(&linear_forward(x, &w, Some(&b)).unwrap(), &up));
        assert_within("linear", trial, "input", e, TOL);
        let e = check(&w, &g.weights, |w| project(&linear_forward(&x, w, Some(&b)).unwrap(), &up));
        assert_within("linear", trial, "weights", e, TOL);
        let e = check(&b, &g.bias, |b| project(&linear_forward(&x, &w, Some(b)).unwrap(), &up));
        assert_within("linear", trial, "bias", e, TOL);
    }
}

pub fn grouped_conv1d_gradients() {
    let mut r = rng(8);
    for trial in 0..TRIALS {
        let groups = [1, 2, 4][r.gen_range(0..3)];
        let c = groups * r.gen_range(1..=4);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let per_group = groups > 1 && r.gen_bool(0.5);
        let taps = if per_group { random(&[groups, k], &mut r) } else { random(&[k], &mut r) };
        let x = random(&[r.gen_range(1..=3), c], &mut r);
        let up = random(x.shape(), &mut r);
        let (gx, gt) = grouped_conv1d_backward(&x, &taps, groups, &up).unwrap();
        let e = check(&x, &gx, |x| project(&grouped_conv1d(x, &taps, groups).unwrap(), &up));
        assert_within("grouped_conv1d", trial, "input", e, TOL);
        let e = check(&taps, &gt, |t| project(&grouped_conv1d(&x, t, groups).unwrap(), &up));
        assert_within("grouped_conv1d", trial, "taps", e, TOL);
    }
}

pub fn cross_entropy_gradients() {
    let mut r = rng(9);
    for trial in 0..TRIALS {
        let n = r.gen_range(1..=5);
        let logits = Tensor::from_fn(&[n, 10], |_| r.gen_range(-4.0..4.0));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let e = check(&logits, &g, |l| cross_entropy(l, &labels).unwrap().0);
        assert_within("cross_entropy", trial, "logits", e, 1e-5);
    }
}

pub fn se_end_to_end_gradients() {
    let mut r = rng(10);
    for trial in 0..TRIALS {
        let c = r.gen_range(2..=8);
        let reduction = r.gen_range(1..=4);
        let mut p = SeParams::zeros(c, reduction);
        p.fc1 = random(p.fc1.shape(), &mut r);
        p.fc2 = random(p.fc2.shape(), &mut r);
        let x = random(&[r.gen_range(1..=2), c, 3, 3], &mut r);
        let up = if trial % 2 == 0 { Tensor::full(x.shape(), 1.0) } else { random(x.shape(), &mut r) };
        let g = se_backward(&x, &p, &up).unwrap();
        let e = check(&x, &g.input, |x| project(&se_forward(x, &p).unwrap(), &up));
        assert_within("se", trial, "input", e, TOL);
        let e = check(&p.fc1, &g.fc1, |w| {
            let q = SeParams { fc1: w.clone(), fc2: p.fc2.clone() };
            project(&se_forward(&x, &q).unwrap(), &up)
        });
        assert_within("se", trial, "fc1", e, TOL);
        let e = check(&p.fc2, &g.fc2, |w| {
            let q = SeParams { fc1: p.fc1.clone(), fc2: w.clone() };
            project(&se_forward(&x, &q).unwrap(), &up)
        });
        assert_within("se", trial, "fc2", e, TOL);
    }
}

fn conv_attention_trials(kind: AttentionKind, seed: u64) {
    let mut r = rng(seed);
    for trial in 0..TRIALS {
        let groups = if kind == AttentionKind::Eca { 1 } else { [2, 4][r.gen_range(0..2)] };
        let c = groups * r.gen_range(1..=4);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let taps = if kind == AttentionKind::Lca && trial % 3 == 2 { random(&[groups, k], &mut r) } else { random(&[k], &mut r) };
        let params = ConvAttentionParams { taps, groups };
        let x = random(&[r.gen_range(1..=2), c, 3, 2], &mut r);
        let up = if trial % 2 == 0 { Tensor::full(x.shape(), 1.0) } else { random(x.shape(), &mut r) };
        let (gx, gt) = conv_attention_backward(&x, &params, &up).unwrap();
        let e = check(&x, &gx, |x| project(&conv_attention_forward(x, &params).unwrap(), &up));
        assert_within(kind.name(), trial, "input", e, TOL);
        let e = check(&params.taps, &gt, |t| {
            let q = ConvAttentionParams { taps: t.clone(), groups };
            project(&conv_attention_forward(&x, &q).unwrap(), &up)
        });
        assert_within(kind.name(), trial, "taps", e, TOL);
    }
}

pub fn eca_end_to_end_gradients() {
    conv_attention_trials(AttentionKind::Eca, 11);
}

pub fn lca_end_to_end_gradients() {
    conv_attention_trials(AttentionKind::Lca, 12);
}

pub fn tiny_resnet(attention: AttentionSpec) -> ModelGraph {
    let layout = ResNetLayout {
        stem_channels: 4,
        stages: vec![
            ResNetStage { channels: 4, blocks: 1, stride: 1 },
            ResNetStage { channels: 8, blocks: 1, stride: 2 },
        ],
    };
    let mut g = build_resnet(&layout, ModelConfig::new(Arch::ResNet18, attention), [3, 6, 6]).unwrap();
    g.init_weights(3);
    g
}

pub fn tiny_mobilenet(attention: AttentionSpec) -> ModelGraph {
    let layout = MobileNetLayout {
        stem_channels: 8,
        stem_stride: 1,
        settings: vec![
            InvertedResidualSetting { expansion: 1, channels: 4, repeats: 1, stride: 1 },
            InvertedResidualSetting { expansion: 2, channels: 8, repeats: 2, stride: 2 },
        ],
        last_channels: 16,
    };
    let mut g = build_mobilenet(&layout, ModelConfig::new(Arch::MobileNetV2, attention), [3, 6, 6]).unwrap();
    g.init_weights(3);
    g
}

/// Perturbs every parameter of `graph` and compares against `backward`.
fn graph_check(mut graph: ModelGraph, seed: u64) -> f64 {
    let mut r = rng(seed);
    // attention weights start near zero; give them some signal
    for p in graph.params_mut() {
        if p.name.contains("attn") {
            p.value = random(p.value.shape(), &mut r);
        }
    }
    let [c, h, w] = graph.input_shape();
    let x = random(&[3, c, h, w], &mut r);
    let logits = graph.forward(&x, true).unwrap();
    let up = random(logits.shape(), &mut r);
    let grads = graph.backward(&up).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = graph.params()[pi].value.data()[j];
            let eval = |v: f64, graph: &mut ModelGraph| {
                graph.params_mut()[pi].value.data_mut()[j] = v;
                project(&graph.forward(&x, true).unwrap(), &up)
            };
            let numeric = (eval(orig + super::common::EPS, &mut graph) - eval(orig - super::common::EPS, &mut graph)) / (2.0 * super::common::EPS);
            graph.params_mut()[pi].value.data_mut()[j] = orig;
            let e = super::common::rel_err(grad.data()[j], numeric);
            assert!(e < 1e-3, "{}[{j}]: analytic {} numeric {numeric}", graph.params()[pi].name, grad.data()[j]);
            worst = worst.max(e);
        }
    }
    worst
}

fn small_attention(kind: AttentionKind) -> AttentionSpec {
    let mut spec = AttentionSpec::new(kind);
    spec.reduction = 4;
    spec
}

pub fn resnet_full_graph_gradients() {
    for (i, kind) in AttentionKind::ALL.into_iter().enumerate() {
        let g = tiny_resnet(small_attention(kind));
        assert!(g.params().iter().any(|p| p.name.contains("attn")) == (kind != AttentionKind::None));
        let e = graph_check(g, 20 + i as u64);
        assert!(e < 1e-3, "resnet/{kind}: {e:e}");
    }
}

pub fn mobilenet_full_graph_gradients() {
    for (i, kind) in AttentionKind::ALL.into_iter().enumerate() {
        let e = graph_check(tiny_mobilenet(small_attention(kind)), 30 + i as u64);
        assert!(e < 1e-3, "mobilenetv2/{kind}: {e:e}");
    }
}

/// Every case by name, for runners outside this crate.
#[allow(dead_code)]
pub const ALL: [(&str, fn()); 15] = [
    ("conv2d_gradients", conv2d_gradients),
    ("depthwise_conv_gradients", depthwise_conv_gradients),
    ("conv2d_reference_instance", conv2d_reference_instance),
    ("batchnorm_gradients", batchnorm_gradients),
    ("activation_gradients", activation_gradients),
    ("sigmoid_backward_at_zero_is_quarter", sigmoid_backward_at_zero_is_quarter),
    ("pooling_and_scaling_gradients", pooling_and_scaling_gradients),
    ("linear_gradients", linear_gradients),
    ("grouped_conv1d_gradients", grouped_conv1d_gradients),
    ("cross_entropy_gradients", cross_entropy_gradients),
    ("se_end_to_end_gradients", se_end_to_end_gradients),
    ("eca_end_to_end_gradients", eca_end_to_end_gradients),
    ("lca_end_to_end_gradients", lca_end_to_end_gradients),
    ("resnet_full_graph_gradients", resnet_full_graph_gradients),
    ("mobilenet_full_graph_gradients", mobilenet_full_graph_gradients),
];
