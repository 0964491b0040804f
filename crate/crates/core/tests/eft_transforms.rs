mod common;

use common::{grouped_conv_oracle, pointwise_oracle, random_array, rel_err};
use eft::eft::{apply_eft_conv, apply_eft_fc, apply_pointwise_branch, apply_spatial_branch, compose};
use eft::{CompositionMode, EftConvParams, EftConvSpec, EftError, EftFcParams};
use ndarray::{array, s, Array4};
use proptest::prelude::*;

fn params(spec: &EftConvSpec, k: usize, seed: u64) -> EftConvParams {
    EftConvParams::random(spec, k, seed).unwrap()
}

#[test]
fn spatial_branch_matches_handwritten_loops_on_small_map() {
    let f = Array4::from_shape_vec((1, 2, 3, 3), (1..=18).map(f64::from).collect()).unwrap();
    let mut w = Array4::<f64>::zeros((2, 2, 3, 3));
    w[[0, 0, 0, 0]] = 1.0;
    w[[0, 1, 1, 1]] = -2.0;
    w[[1, 0, 2, 2]] = 0.5;
    w[[1, 1, 0, 1]] = 3.0;
    let p = EftConvParams { spatial: Some(w.clone()), pointwise: None };
    let h = apply_spatial_branch(&f, &p, 2).unwrap();
    assert_eq!(h, grouped_conv_oracle(&f, &w, 2, 1));
    // Spot check one pixel by hand: output channel 0 at (1, 1) reads
    // F0(0, 0) · 1 + F1(1, 1) · (−2) = 1 − 28.
    assert_eq!(h[[0, 0, 1, 1]], 1.0 - 2.0 * 14.0);
}

#[test]
fn pointwise_example_from_direct_dot_products() {
    let f = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
    let w = Array4::from_shape_vec((2, 2, 1, 1), vec![1.0, 1.0, 0.0, -1.0]).unwrap();
    let p = EftConvParams { spatial: None, pointwise: Some(w) };
    let h = apply_pointwise_branch(&f, &p, 2).unwrap();
    assert_eq!(h.iter().copied().collect::<Vec<_>>(), vec![3.0, -2.0]);
}

#[test]
fn pointwise_matches_matrix_vector_oracle() {
    let spec = EftConvSpec::serial(0, 4).unwrap();
    let p = params(&spec, 8, 5);
    let f = random_array((2, 8, 3, 4), 9);
    let h = apply_pointwise_branch(&f, &p, 4).unwrap();
    assert!(rel_err(&h, &pointwise_oracle(&f, p.pointwise.as_ref().unwrap(), 4)) < 1e-12);
}

#[test]
fn identity_and_zero_filters() {
    let f = random_array((2, 8, 5, 5), 1);
    for (a, b) in [(4, 8), (2, 0), (0, 4), (8, 2)] {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let id = EftConvParams::identity(&spec, 8).unwrap();
        assert_eq!(apply_eft_conv(&f, &id, &spec).unwrap(), f, "a{a}b{b}");
        assert_eq!(compose(&f, &f, &id, &spec).unwrap(), f);
        let mut zero = id.clone();
        zero.spatial.iter_mut().chain(zero.pointwise.iter_mut()).for_each(|w| w.fill(0.0));
        assert!(apply_eft_conv(&f, &zero, &spec).unwrap().iter().all(|&v| v == 0.0));
        // Parallel composition with zero filters is the base output.
        let par = EftConvSpec::new(a, b, CompositionMode::Parallel).unwrap();
        assert_eq!(compose(&f, &f, &zero, &par).unwrap(), f);
    }
}

#[test]
fn branch_selection_follows_gamma() {
    let f = random_array((1, 8, 4, 4), 2);
    let both = EftConvSpec::serial(4, 2).unwrap();
    let p = params(&both, 8, 3);
    let spatial_only = EftConvSpec::serial(4, 0).unwrap();
    let ps = EftConvParams { spatial: p.spatial.clone(), pointwise: None };
    assert_eq!(apply_eft_conv(&f, &ps, &spatial_only).unwrap(), apply_spatial_branch(&f, &p, 4).unwrap());
    let pointwise_only = EftConvSpec::serial(0, 2).unwrap();
    let pd = EftConvParams { spatial: None, pointwise: p.pointwise.clone() };
    assert_eq!(apply_eft_conv(&f, &pd, &pointwise_only).unwrap(), apply_pointwise_branch(&f, &p, 2).unwrap());
    let sum = apply_spatial_branch(&f, &p, 4).unwrap() + apply_pointwise_branch(&f, &p, 2).unwrap();
    assert_eq!(apply_eft_conv(&f, &p, &both).unwrap(), sum);
    assert!(both.gamma() && !spatial_only.gamma());
}

#[test]
fn parallel_adds_oracle_eft_of_the_input() {
    let spec = EftConvSpec::new(2, 4, CompositionMode::Parallel).unwrap();
    let p = params(&spec, 4, 11);
    let input = random_array((1, 4, 3, 3), 12);
    let base = random_array((1, 4, 3, 3), 13);
    let expected = &base
        + &grouped_conv_oracle(&input, p.spatial.as_ref().unwrap(), 2, 1)
        + &pointwise_oracle(&input, p.pointwise.as_ref().unwrap(), 4);
    assert!(rel_err(&compose(&input, &base, &p, &spec).unwrap(), &expected) < 1e-12);
}

#[test]
fn parallel_falls_back_to_residual_on_channel_change() {
    let spec = EftConvSpec::new(2, 0, CompositionMode::Parallel).unwrap();
    let p = params(&spec, 4, 1);
    let input = random_array((1, 2, 3, 3), 2);
    let base = random_array((1, 4, 3, 3), 3);
    let expected = &base + &grouped_conv_oracle(&base, p.spatial.as_ref().unwrap(), 2, 1);
    assert!(rel_err(&compose(&input, &base, &p, &spec).unwrap(), &expected) < 1e-12);
}

#[test]
fn fc_calibration_is_a_hadamard_product() {
    let f = array![1.0, 2.0, 3.0];
    let e = EftFcParams { e: array![2.0, 0.0, -1.0] };
    assert_eq!(apply_eft_fc(f.view(), &e).unwrap(), array![2.0, 0.0, -3.0]);
    assert_eq!(apply_eft_fc(f.view(), &EftFcParams::identity(3)).unwrap(), f);
    let zero = EftFcParams { e: ndarray::Array1::zeros(3) };
    assert!(apply_eft_fc(f.view(), &zero).unwrap().iter().all(|&v| v == 0.0));
    assert!(matches!(apply_eft_fc(f.view(), &EftFcParams::identity(4)), Err(EftError::DimensionMismatch(_))));
}

#[test]
fn mismatched_shapes_are_dimension_errors() {
    let spec = EftConvSpec::serial(4, 0).unwrap();
    let p = params(&spec, 8, 0);
    let f = random_array((1, 6, 3, 3), 0);
    assert!(matches!(apply_spatial_branch(&f, &p, 4), Err(EftError::DimensionMismatch(_))));
    assert!(matches!(apply_eft_conv(&f, &p, &spec), Err(EftError::DimensionMismatch(_))));
    assert!(EftConvSpec::serial(0, 0).is_err());
}

#[test]
fn initializers_are_deterministic_and_independent() {
    let spec = EftConvSpec::serial(4, 8).unwrap();
    assert_eq!(params(&spec, 16, 7), params(&spec, 16, 7));
    assert_ne!(params(&spec, 16, 7), params(&spec, 16, 8));
    let original = params(&spec, 16, 7);
    let mut copy = EftConvParams::from_previous(&original);
    assert_eq!(copy, original);
    copy.spatial.as_mut().unwrap()[[0, 0, 0, 0]] += 1.0;
    assert_eq!(original, params(&spec, 16, 7));
}

fn valid_configs() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    // (K, a, b, height, width, seed) with K ≤ 16 and a, b ∈ {0, 1, 2, 4, 8}.
    (prop::sample::select(vec![1usize, 2, 4, 8, 16]), 0usize..5, 0usize..5, 1usize..6, 1usize..6, any::<u64>())
        .prop_filter_map("valid spec", |(k, ai, bi, h, w, seed)| {
            let card = [0usize, 1, 2, 4, 8];
            let (a, b) = (card[ai], card[bi]);
            let ok = (a > 0 || b > 0) && (a == 0 || k % a == 0) && (b == 0 || k % b == 0);
            ok.then_some((k, a, b, h, w, seed))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_shape_equals_input_shape((k, a, b, h, w, seed) in valid_configs()) {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let f = random_array((2, k, h, w), seed);
        let out = apply_eft_conv(&f, &params(&spec, k, seed), &spec).unwrap();
        prop_assert_eq!(out.dim(), f.dim());
    }

    #[test]
    fn matches_nested_loop_oracle((k, a, b, h, w, seed) in valid_configs()) {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let p = params(&spec, k, seed);
        let f = random_array((2, k, h, w), seed ^ 1);
        let mut expected = Array4::<f64>::zeros(f.dim());
        if let Some(ws) = &p.spatial {
            expected += &grouped_conv_oracle(&f, ws, a, 1);
        }
        if let Some(wd) = &p.pointwise {
            expected += &pointwise_oracle(&f, wd, b);
        }
        prop_assert!(rel_err(&apply_eft_conv(&f, &p, &spec).unwrap(), &expected) < 1e-5);
    }

    #[test]
    fn transform_is_linear((k, a, b, h, w, seed) in valid_configs(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let p = params(&spec, k, seed);
        let f1 = random_array((1, k, h, w), seed ^ 2);
        let f2 = random_array((1, k, h, w), seed ^ 3);
        let mixed = apply_eft_conv(&(&f1 * alpha + &f2 * beta), &p, &spec).unwrap();
        let separate = apply_eft_conv(&f1, &p, &spec).unwrap() * alpha + apply_eft_conv(&f2, &p, &spec).unwrap() * beta;
        prop_assert!(rel_err(&mixed, &separate) < 1e-5);
    }

    #[test]
    fn perturbation_stays_within_its_group((k, a, b, h, w, seed) in valid_configs(), c_pick in any::<prop::sample::Index>()) {
        let spec = EftConvSpec::serial(a, b).unwrap();
        let p = params(&spec, k, seed);
        let f = random_array((1, k, h, w), seed ^ 4);
        let c = c_pick.index(k);
        let mut g = f.clone();
        g.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + 1.0);
        let diff = apply_eft_conv(&g, &p, &spec).unwrap() - apply_eft_conv(&f, &p, &spec).unwrap();
        for o in 0..k {
            let in_spatial = a > 0 && o / a == c / a;
            let in_pointwise = b > 0 && o / b == c / b;
            if !in_spatial && !in_pointwise {
                prop_assert!(diff.slice(s![.., o, .., ..]).iter().all(|&v| v == 0.0), "channel {} leaked into {}", c, o);
            }
        }
    }
}
