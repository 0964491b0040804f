//! Oracles shared by the integration tests. They are deliberately naive:
//! plain nested loops over explicit indices, no GEMM, no im2col.

#![allow(dead_code)]

use eft::autodiff::{Tape, Tensor};
use eft::backbones::{classifier_on_tape, forward_with_features, Activation, BoundGlobal, BoundTask, ConvLayer, FcLayer, Layer, NormMode};
use eft::margin::{fit_gaussian, margin_loss, margin_loss_on_tape};
use eft::registry::TaskHead;
use eft::{ArchSpec, EftConvParams, EftConvSpec, EftFcParams, GaussianStats, GlobalParams, TaskParams};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Grouped 2-D convolution, stride 1, with `groups = K / cardinality`;
/// output channel `k` reads input channels `[g·card, (g+1)·card)` where
/// `g = k / card`.
pub fn grouped_conv_oracle(f: &Array4<f64>, w: &Array4<f64>, cardinality: usize, padding: usize) -> Array4<f64> {
    let (b, k, m, n) = f.dim();
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (om, on) = (m + 2 * padding + 1 - kh, n + 2 * padding + 1 - kw);
    let mut out = Array4::zeros((b, k, om, on));
    for s in 0..b {
        for o in 0..k {
            let g = o / cardinality;
            for y in 0..om {
                for x in 0..on {
                    let mut acc = 0.0;
                    for j in 0..cardinality {
                        let c = g * cardinality + j;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = y as isize + dy as isize - padding as isize;
                                let ix = x as isize + dx as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < m && (ix as usize) < n {
                                    acc += w[[o, j, dy, dx]] * f[[s, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[s, o, y, x]] = acc;
                }
            }
        }
    }
    out
}

/// Per-pixel block-diagonal matrix–vector product for 1×1 grouped filters.
pub fn pointwise_oracle(f: &Array4<f64>, w: &Array4<f64>, cardinality: usize) -> Array4<f64> {
    let (b, k, m, n) = f.dim();
    let mut out = Array4::zeros((b, k, m, n));
    for s in 0..b {
        for y in 0..m {
            for x in 0..n {
                // Dense K×K matrix with only the diagonal blocks filled.
                let mut mat = Array2::<f64>::zeros((k, k));
                for o in 0..k {
                    let g = o / cardinality;
                    for j in 0..cardinality {
                        mat[[o, g * cardinality + j]] = w[[o, j, 0, 0]];
                    }
                }
                for o in 0..k {
                    out[[s, o, y, x]] = (0..k).map(|c| mat[[o, c]] * f[[s, c, y, x]]).sum();
                }
            }
        }
    }
    out
}

pub fn random_array(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// `max |a − b| / max(1, max |b|)`.
pub fn rel_err(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const STEP: f64 = 1e-3;

/// Central difference of `f` with respect to every coordinate of `x`.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + STEP;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - STEP;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * STEP);
    }
    g
}

pub fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn toy_arch() -> ArchSpec {
    let conv = |i, o| {
        Layer::Conv(ConvLayer { in_channels: i, out_channels: o, kernel: 3, stride: 1, padding: 1, bias: true, adapt: true })
    };
    ArchSpec {
        name: "toy".into(),
        input_shape: [2, 4, 4],
        layers: vec![
            conv(2, 4),
            Layer::Activation(Activation::Tanh),
            conv(4, 4),
            Layer::Activation(Activation::Tanh),
            Layer::GlobalAvgPool,
            Layer::Flatten,
            Layer::Fc(FcLayer { in_dim: 4, out_dim: 4, calibrate: true }),
        ],
        head_classes: Some(3),
    }
}

/// Cross-entropy plus λ·margin for the toy network, returning analytic
/// gradients of every task tensor in `named_tensors` order.
pub fn toy_loss(
    arch: &ArchSpec,
    global: &GlobalParams,
    task: &TaskParams,
    spec: &EftConvSpec,
    x: &Tensor,
    y: &[usize],
    prior: &[GaussianStats],
) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let bg = BoundGlobal::bind(&tape, global, false);
    let bt = BoundTask::bind(&tape, task, true);
    let xv = tape.constant(x.clone());
    let out = classifier_on_tape(&tape, arch, &bg, Some(&bt), bt.head.unwrap(), spec, xv, NormMode::Running).unwrap();
    let ce = tape.cross_entropy(out.logits, y).unwrap();
    let lm = margin_loss_on_tape(&tape, out.features, prior, 5.0).unwrap();
    let loss = tape.add(ce, tape.scale(lm, 0.5)).unwrap();
    let grads = tape.backward(loss);
    let g = bt.named_vars().into_iter().map(|(_, v)| grads.get(v).unwrap().clone()).collect();
    (tape.scalar_value(loss), g)
}

/// Relative error of the analytic gradient of cross-entropy + margin with
/// respect to every task tensor of the toy network, against central
/// differences.
pub fn toy_gradient_errors() -> Vec<(String, f64)> {
    let arch = toy_arch();
    let spec = EftConvSpec::serial(2, 2).unwrap();
    let global = GlobalParams::init(&arch, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let conv = vec![EftConvParams::random_with(&spec, 4, &mut rng).unwrap(), EftConvParams::random_with(&spec, 4, &mut rng).unwrap()];
    let task = TaskParams {
        task_id: 1,
        classes: vec![0, 1, 2],
        conv,
        fc: vec![EftFcParams { e: Array1::from(vec![1.0, 0.8, 1.2, 0.9]) }],
        head: Some(TaskHead::random(3, 4, &mut rng)),
        finalized: false,
    };
    let x = random_array((6, 2, 4, 4), 3).into_dyn();
    let y = [0, 1, 2, 0, 1, 2];
    // A prior close enough to the features that the hinge is active.
    let feats = Array2::from_shape_fn((6, 4), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64);
    let prior = vec![fit_gaussian(feats.view()).unwrap()];
    let (_, features) = forward_with_features(&x.clone().into_dimensionality().unwrap(), &arch, &global, &task, &spec).unwrap();
    let active = margin_loss(&fit_gaussian(features.view()).unwrap(), &prior, 5.0).unwrap();
    assert!(active > 0.0, "margin term must contribute to the checked gradient");
    let (_, analytic) = toy_loss(&arch, &global, &task, &spec, &x, &y, &prior);

    let names: Vec<String> = task.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), analytic.len());
    let mut errors = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        let original = task.named_tensors()[idx].1.clone();
        let numeric = numeric_grad(&original, |probe| {
            let mut t = task.clone();
            for (n, mut view) in t.tensors_mut().unwrap() {
                if &n == name {
                    view.assign(probe);
                }
            }
            toy_loss(&arch, &global, &t, &spec, &x, &y, &prior).0
        });
        errors.push((name.clone(), max_rel(&analytic[idx], &numeric)));
    }
    errors
}
