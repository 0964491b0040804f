//! Analytic gradients against central finite differences (step 1e-3).

mod common;

use common::{max_rel, numeric_grad, random_array, toy_gradient_errors};
use eft::autodiff::{Tape, Tensor};
use eft::eft::{compose_on_tape, eft_conv_on_tape, SiteVars};
use eft::{CompositionMode, EftConvParams, EftConvSpec};
use ndarray::{Array1, Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn site_loss(spec: &EftConvSpec, f: &Tensor, ws: Option<&Tensor>, wd: Option<&Tensor>, r: &Tensor) -> (f64, Tape, Vec<Option<ndarray::ArrayD<f64>>>) {
    let tape = Tape::new();
    let fv = tape.leaf(f.clone(), true);
    let sv = SiteVars {
        spatial: ws.map(|w| tape.leaf(w.clone(), true)),
        pointwise: wd.map(|w| tape.leaf(w.clone(), true)),
    };
    let h = eft_conv_on_tape(&tape, fv, sv, spec).unwrap();
    let loss = tape.weighted_sum(h, r).unwrap();
    let value = tape.scalar_value(loss);
    let grads = tape.backward(loss);
    let out = vec![
        grads.get(fv).cloned(),
        sv.spatial.and_then(|v| grads.get(v).cloned()),
        sv.pointwise.and_then(|v| grads.get(v).cloned()),
    ];
    (value, tape, out)
}

#[test]
fn eft_conv_gradients_match_finite_differences() {
    for (a, b) in [(2, 4), (4, 0), (0, 2), (1, 1)] {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let p = EftConvParams::random(&spec, 4, 3).unwrap();
        let f = random_array((2, 4, 5, 5), 1).into_dyn();
        let r = random_array((2, 4, 5, 5), 2).into_dyn();
        let ws = p.spatial.map(|w| w.into_dyn());
        let wd = p.pointwise.map(|w| w.into_dyn());
        let (_, _, g) = site_loss(&spec, &f, ws.as_ref(), wd.as_ref(), &r);

        let num_f = numeric_grad(&f, |x| site_loss(&spec, x, ws.as_ref(), wd.as_ref(), &r).0);
        assert!(max_rel(g[0].as_ref().unwrap(), &num_f) < 1e-6, "a{a}b{b} input");
        if let Some(w) = &ws {
            let num = numeric_grad(w, |x| site_loss(&spec, &f, Some(x), wd.as_ref(), &r).0);
            assert!(max_rel(g[1].as_ref().unwrap(), &num) < 1e-6, "a{a}b{b} spatial");
        }
        if let Some(w) = &wd {
            let num = numeric_grad(w, |x| site_loss(&spec, &f, ws.as_ref(), Some(x), &r).0);
            assert!(max_rel(g[2].as_ref().unwrap(), &num) < 1e-6, "a{a}b{b} pointwise");
        }
    }
}

#[test]
fn parallel_composition_gradient_reaches_the_input() {
    let spec = EftConvSpec::new(2, 2, CompositionMode::Parallel).unwrap();
    let p = EftConvParams::random(&spec, 4, 5).unwrap();
    let x = random_array((1, 4, 3, 3), 6).into_dyn();
    let base = random_array((1, 4, 3, 3), 7).into_dyn();
    let r = random_array((1, 4, 3, 3), 8).into_dyn();
    let eval = |xin: &Tensor| -> (f64, Tensor) {
        let tape = Tape::new();
        let xv = tape.leaf(xin.clone(), true);
        let bv = tape.leaf(base.clone(), true);
        let sv = SiteVars {
            spatial: p.spatial.as_ref().map(|w| tape.leaf(w.clone().into_dyn(), false)),
            pointwise: p.pointwise.as_ref().map(|w| tape.leaf(w.clone().into_dyn(), false)),
        };
        let h = compose_on_tape(&tape, xv, bv, sv, &spec).unwrap();
        let loss = tape.weighted_sum(h, &r).unwrap();
        let g = tape.backward(loss);
        (tape.scalar_value(loss), g.get(xv).unwrap().clone())
    };
    let (_, analytic) = eval(&x);
    assert!(max_rel(&analytic, &numeric_grad(&x, |v| eval(v).0)) < 1e-6);
}

#[test]
fn fc_calibration_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - 1.0) * 0.3 + j as f64 * 0.1).into_dyn();
    let e = Array1::from_iter((0..5).map(|i| 1.0 - 0.2 * i as f64)).into_dyn();
    let r = {
        use rand::Rng;
        Tensor::from_shape_fn(IxDyn(&[3, 5]), |_| rng.random_range(-1.0..1.0))
    };
    let eval = |ev: &Tensor| -> (f64, Tensor) {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let evv = tape.leaf(ev.clone(), true);
        let y = tape.mul_columns(xv, evv).unwrap();
        let y = tape.tanh(y);
        let loss = tape.weighted_sum(y, &r).unwrap();
        let g = tape.backward(loss);
        (tape.scalar_value(loss), g.get(evv).unwrap().clone())
    };
    let (_, analytic) = eval(&e);
    assert!(max_rel(&analytic, &numeric_grad(&e, |v| eval(v).0)) < 1e-6);
}

#[test]
fn end_to_end_joint_loss_gradients() {
    for (name, err) in toy_gradient_errors() {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}
