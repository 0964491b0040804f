//! Task-specific feature transformations.
//!
//! A convolutional EFT has two grouped branches over a feature map with `K`
//! channels:
//!
//! * a spatial branch: `K / a` groups of `a` channels, each output channel a
//!   3x3 filter over its group (`spatial` filters of shape `(K, a, 3, 3)`);
//! * a pointwise branch: `K / b` groups of `b` channels mixed by 1x1 filters
//!   (`pointwise` filters of shape `(K, b, 1, 1)`).
//!
//! The branches are summed, `H = Hs + Hd`, with either branch disabled by
//! setting its cardinality to zero. Fully connected layers get a diagonal
//! calibration `h = e ⊙ f`. Nothing here carries a bias.

use ndarray::{Array1, Array4, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EftError, Result};
use crate::kernels::{self, ConvGeometry};

/// Rank-4 `(batch, channels, height, width)` activations.
pub type FeatureMap = Array4<f64>;

pub const SPATIAL_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CompositionMode {
    /// `H = EFT(F)`: transform the base layer's output.
    #[default]
    Serial,
    /// `H' = F + EFT(I)`: run the transform alongside the base layer.
    Parallel,
}

impl std::str::FromStr for CompositionMode {
    type Err = EftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Self::Serial),
            "parallel" => Ok(Self::Parallel),
            other => Err(EftError::InvalidSpec(format!("unknown composition mode `{other}`"))),
        }
    }
}

/// Group cardinalities and composition mode shared by every insertion site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EftConvSpec {
    pub a: usize,
    pub b: usize,
    #[serde(default)]
    pub mode: CompositionMode,
}

impl EftConvSpec {
    pub fn new(a: usize, b: usize, mode: CompositionMode) -> Result<Self> {
        let spec = Self { a, b, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn serial(a: usize, b: usize) -> Result<Self> {
        Self::new(a, b, CompositionMode::Serial)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0 && self.b == 0 {
            return Err(EftError::InvalidSpec(
                "spatial and pointwise branches cannot both be disabled".into(),
            ));
        }
        Ok(())
    }

    /// Whether the pointwise branch contributes (`γ = 1`).
    pub fn gamma(&self) -> bool {
        self.b > 0
    }

    pub fn check_site(&self, channels: usize) -> Result<()> {
        self.validate()?;
        if self.a > 0 && !channels.is_multiple_of(self.a) {
            return Err(EftError::dims(format!(
                "{channels} channels not divisible by spatial cardinality a={}",
                self.a
            )));
        }
        if self.b > 0 && !channels.is_multiple_of(self.b) {
            return Err(EftError::dims(format!(
                "{channels} channels not divisible by pointwise cardinality b={}",
                self.b
            )));
        }
        Ok(())
    }

    /// Short label in the `a8b16` style.
    pub fn label(&self) -> String {
        format!("a{}b{}", self.a, self.b)
    }
}

/// Filters of one convolutional insertion site.
#[derive(Debug, Clone, PartialEq)]
pub struct EftConvParams {
    pub spatial: Option<Array4<f64>>,
    pub pointwise: Option<Array4<f64>>,
}

impl EftConvParams {
    /// Parameters for which serial composition is the exact identity map:
    /// Dirac spatial filters and zero pointwise filters (or Dirac pointwise
    /// filters when the spatial branch is disabled).
    pub fn identity(spec: &EftConvSpec, channels: usize) -> Result<Self> {
        spec.check_site(channels)?;
        let spatial = (spec.a > 0).then(|| {
            let mut w = Array4::zeros((channels, spec.a, SPATIAL_KERNEL, SPATIAL_KERNEL));
            for k in 0..channels {
                w[[k, k % spec.a, 1, 1]] = 1.0;
            }
            w
        });
        let pointwise = (spec.b > 0).then(|| {
            let mut w = Array4::zeros((channels, spec.b, 1, 1));
            if spec.a == 0 {
                for k in 0..channels {
                    w[[k, k % spec.b, 0, 0]] = 1.0;
                }
            }
            w
        });
        Ok(Self { spatial, pointwise })
    }

    /// Zero-mean normal filters with variance `2 / fan_in`.
    pub fn random(spec: &EftConvSpec, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(spec, channels, &mut rng)
    }

    pub fn random_with(spec: &EftConvSpec, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.check_site(channels)?;
        let mut draw = |shape: (usize, usize, usize, usize)| {
            let fan_in = (shape.1 * shape.2 * shape.3) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            Array4::from_shape_simple_fn(shape, || normal.sample(rng))
        };
        let spatial =
            (spec.a > 0).then(|| draw((channels, spec.a, SPATIAL_KERNEL, SPATIAL_KERNEL)));
        let pointwise = (spec.b > 0).then(|| draw((channels, spec.b, 1, 1)));
        Ok(Self { spatial, pointwise })
    }

    /// Forward-transfer initialisation: an independent copy.
    pub fn from_previous(prev: &Self) -> Self {
        prev.clone()
    }

    pub fn channels(&self) -> usize {
        self.spatial
            .as_ref()
            .or(self.pointwise.as_ref())
            .map(|w| w.shape()[0])
            .unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.spatial.as_ref().map_or(0, |w| w.len()) + self.pointwise.as_ref().map_or(0, |w| w.len())
    }

    /// Checks the filters are consistent with `spec` at a site of `channels`.
    pub fn check(&self, spec: &EftConvSpec, channels: usize) -> Result<()> {
        spec.check_site(channels)?;
        let ok_s = match (&self.spatial, spec.a) {
            (None, 0) => true,
            (Some(w), a) if a > 0 => w.shape() == [channels, a, SPATIAL_KERNEL, SPATIAL_KERNEL],
            _ => false,
        };
        let ok_p = match (&self.pointwise, spec.b) {
            (None, 0) => true,
            (Some(w), b) if b > 0 => w.shape() == [channels, b, 1, 1],
            _ => false,
        };
        if ok_s && ok_p {
            Ok(())
        } else {
            Err(EftError::dims(format!(
                "EFT filters {:?}/{:?} inconsistent with {} at {channels} channels",
                self.spatial.as_ref().map(|w| w.shape().to_vec()),
                self.pointwise.as_ref().map(|w| w.shape().to_vec()),
                spec.label()
            )))
        }
    }
}

/// Diagonal calibration of a fully connected output.
#[derive(Debug, Clone, PartialEq)]
pub struct EftFcParams {
    pub e: Array1<f64>,
}

impl EftFcParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            e: Array1::ones(dim),
        }
    }

    pub fn from_previous(prev: &Self) -> Self {
        prev.clone()
    }

    pub fn dim(&self) -> usize {
        self.e.len()
    }
}

fn grouped_conv(f: &FeatureMap, w: &Array4<f64>, cardinality: usize, padding: usize) -> Result<FeatureMap> {
    let (b, k, m, n) = f.dim();
    let [wk, wc, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if cardinality == 0 || k % cardinality != 0 {
        return Err(EftError::dims(format!(
            "{k} channels not divisible by group cardinality {cardinality}"
        )));
    }
    if wk != k || wc != cardinality {
        return Err(EftError::dims(format!(
            "filters {:?} do not match {k} channels with cardinality {cardinality}",
            w.shape()
        )));
    }
    let geo = ConvGeometry {
        batch: b,
        in_channels: k,
        in_h: m,
        in_w: n,
        out_channels: k,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        padding,
        groups: k / cardinality,
    };
    let input = f.as_standard_layout();
    let weight = w.as_standard_layout();
    let mut out = vec![0.0; geo.output_len()];
    kernels::conv2d_forward(
        &geo,
        input.as_slice().expect("standard layout"),
        weight.as_slice().expect("standard layout"),
        &mut out,
    );
    Ok(Array4::from_shape_vec((b, k, m, n), out).expect("shape preserved"))
}

/// Spatial branch `Hs`: grouped 3x3 convolution with cardinality `a`,
/// stride 1 and zero padding 1.
pub fn apply_spatial_branch(f: &FeatureMap, params: &EftConvParams, a: usize) -> Result<FeatureMap> {
    let w = params
        .spatial
        .as_ref()
        .ok_or_else(|| EftError::dims("spatial branch has no filters"))?;
    if w.shape()[2..] != [SPATIAL_KERNEL, SPATIAL_KERNEL] {
        return Err(EftError::dims(format!("spatial filters {:?} are not 3x3", w.shape())));
    }
    grouped_conv(f, w, a, 1)
}

/// Pointwise branch `Hd`: grouped 1x1 convolution with cardinality `b`.
pub fn apply_pointwise_branch(f: &FeatureMap, params: &EftConvParams, b: usize) -> Result<FeatureMap> {
    let w = params
        .pointwise
        .as_ref()
        .ok_or_else(|| EftError::dims("pointwise branch has no filters"))?;
    if w.shape()[2..] != [1, 1] {
        return Err(EftError::dims(format!("pointwise filters {:?} are not 1x1", w.shape())));
    }
    grouped_conv(f, w, b, 0)
}

/// `H = Hs + γ·Hd`.
pub fn apply_eft_conv(f: &FeatureMap, params: &EftConvParams, spec: &EftConvSpec) -> Result<FeatureMap> {
    spec.check_site(f.dim().1)?;
    params.check(spec, f.dim().1)?;
    match (spec.a > 0, spec.b > 0) {
        (true, true) => {
            let mut h = apply_spatial_branch(f, params, spec.a)?;
            h += &apply_pointwise_branch(f, params, spec.b)?;
            Ok(h)
        }
        (true, false) => apply_spatial_branch(f, params, spec.a),
        (false, true) => apply_pointwise_branch(f, params, spec.b),
        (false, false) => unreachable!("rejected by check_site"),
    }
}

/// `h = e ⊙ f`.
pub fn apply_eft_fc(f: ArrayView1<f64>, params: &EftFcParams) -> Result<Array1<f64>> {
    if f.len() != params.e.len() {
        return Err(EftError::dims(format!(
            "feature length {} vs calibration length {}",
            f.len(),
            params.e.len()
        )));
    }
    Ok(&f * &params.e)
}

/// Whether the parallel variant can feed the layer input `I` to the EFT.
pub fn parallel_accepts_input(input_dims: (usize, usize, usize, usize), base_dims: (usize, usize, usize, usize)) -> bool {
    input_dims.1 == base_dims.1 && input_dims.2 == base_dims.2 && input_dims.3 == base_dims.3
}

/// Composes a base layer output with its EFT.
///
/// Serial: `EFT(F)`. Parallel: `F + EFT(I)` when `I` and `F` have the same
/// channel count and spatial size, otherwise `F + EFT(F)`.
pub fn compose(
    input: &FeatureMap,
    base_out: &FeatureMap,
    params: &EftConvParams,
    spec: &EftConvSpec,
) -> Result<FeatureMap> {
    match spec.mode {
        CompositionMode::Serial => apply_eft_conv(base_out, params, spec),
        CompositionMode::Parallel => {
            let source = if parallel_accepts_input(input.dim(), base_out.dim()) {
                input
            } else {
                base_out
            };
            let mut h = apply_eft_conv(source, params, spec)?;
            h += base_out;
            Ok(h)
        }
    }
}

/// Tape handles for one site's filters.
#[derive(Debug, Clone, Copy)]
pub struct SiteVars {
    pub spatial: Option<Var>,
    pub pointwise: Option<Var>,
}

/// Differentiable `H = Hs + γ·Hd` on a tape.
pub fn eft_conv_on_tape(tape: &Tape, f: Var, site: SiteVars, spec: &EftConvSpec) -> Result<Var> {
    let k = tape.value(f).shape()[1];
    spec.check_site(k)?;
    let hs = match site.spatial {
        Some(w) if spec.a > 0 => Some(tape.conv2d(f, w, 1, 1, k / spec.a)?),
        _ => None,
    };
    let hd = match site.pointwise {
        Some(w) if spec.b > 0 => Some(tape.conv2d(f, w, 1, 0, k / spec.b)?),
        _ => None,
    };
    match (hs, hd) {
        (Some(s), Some(d)) => tape.add(s, d),
        (Some(s), None) => Ok(s),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(EftError::dims("site has no filters for the configured branches")),
    }
}

/// Differentiable counterpart of [`compose`].
pub fn compose_on_tape(
    tape: &Tape,
    input: Var,
    base_out: Var,
    site: SiteVars,
    spec: &EftConvSpec,
) -> Result<Var> {
    match spec.mode {
        CompositionMode::Serial => eft_conv_on_tape(tape, base_out, site, spec),
        CompositionMode::Parallel => {
            let dims = |v: Var| {
                let t = tape.value(v);
                let s = t.shape();
                (s[0], s[1], s[2], s[3])
            };
            let source = if parallel_accepts_input(dims(input), dims(base_out)) {
                input
            } else {
                base_out
            };
            let h = eft_conv_on_tape(tape, source, site, spec)?;
            tape.add(base_out, h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_map(shape: (usize, usize, usize, usize), seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array4::from_shape_simple_fn(shape, || normal.sample(&mut rng))
    }

    #[test]
    fn both_branches_disabled_is_rejected() {
        assert!(EftConvSpec::serial(0, 0).is_err());
        assert!(EftConvSpec::serial(0, 64).is_ok());
        assert!(EftConvSpec::serial(4, 0).is_ok());
    }

    #[test]
    fn gamma_follows_pointwise_cardinality() {
        assert!(EftConvSpec::serial(4, 8).unwrap().gamma());
        assert!(!EftConvSpec::serial(4, 0).unwrap().gamma());
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let spec = EftConvSpec::serial(3, 0).unwrap();
        assert!(matches!(
            EftConvParams::identity(&spec, 8),
            Err(EftError::DimensionMismatch(_))
        ));
        let good = EftConvParams::identity(&EftConvSpec::serial(2, 0).unwrap(), 8).unwrap();
        assert!(apply_spatial_branch(&sample_map((1, 6, 3, 3), 0), &good, 2).is_err());
    }

    #[test]
    fn identity_init_is_identity_for_every_branch_setting() {
        let f = sample_map((2, 8, 5, 4), 1);
        for (a, b) in [(4, 0), (0, 4), (2, 8), (8, 2), (1, 1)] {
            let spec = EftConvSpec::serial(a, b).unwrap();
            let p = EftConvParams::identity(&spec, 8).unwrap();
            assert_eq!(apply_eft_conv(&f, &p, &spec).unwrap(), f, "a{a}b{b}");
        }
    }

    #[test]
    fn zero_filters_give_zero_output() {
        let spec = EftConvSpec::serial(2, 0).unwrap();
        let p = EftConvParams {
            spatial: Some(Array4::zeros((4, 2, 3, 3))),
            pointwise: None,
        };
        let h = apply_spatial_branch(&sample_map((1, 4, 3, 3), 2), &p, spec.a).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_two_channel_example() {
        let f = Array4::from_shape_vec((1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let p = EftConvParams {
            spatial: None,
            pointwise: Some(Array4::from_shape_vec((2, 2, 1, 1), vec![1.0, 1.0, 0.0, -1.0]).unwrap()),
        };
        let h = apply_pointwise_branch(&f, &p, 2).unwrap();
        assert_eq!(h.iter().copied().collect::<Vec<_>>(), vec![3.0, -2.0]);
    }

    #[test]
    fn diagonal_calibration_examples() {
        let f = array![1.0, 2.0, 3.0];
        let h = apply_eft_fc(f.view(), &EftFcParams { e: array![2.0, 0.0, -1.0] }).unwrap();
        assert_eq!(h, array![2.0, 0.0, -3.0]);
        assert_eq!(apply_eft_fc(f.view(), &EftFcParams::identity(3)).unwrap(), f);
        let zero = apply_eft_fc(f.view(), &EftFcParams { e: Array1::zeros(3) }).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(apply_eft_fc(f.view(), &EftFcParams::identity(4)).is_err());
    }

    #[test]
    fn branch_toggles_select_single_branch() {
        let f = sample_map((1, 4, 3, 3), 3);
        let spec_s = EftConvSpec::serial(2, 0).unwrap();
        let ps = EftConvParams::random(&spec_s, 4, 9).unwrap();
        assert_eq!(
            apply_eft_conv(&f, &ps, &spec_s).unwrap(),
            apply_spatial_branch(&f, &ps, 2).unwrap()
        );
        let spec_d = EftConvSpec::serial(0, 2).unwrap();
        let pd = EftConvParams::random(&spec_d, 4, 9).unwrap();
        assert_eq!(
            apply_eft_conv(&f, &pd, &spec_d).unwrap(),
            apply_pointwise_branch(&f, &pd, 2).unwrap()
        );
    }

    #[test]
    fn compose_modes() {
        let input = sample_map((1, 4, 3, 3), 4);
        let base = sample_map((1, 4, 3, 3), 5);
        let serial = EftConvSpec::serial(2, 4).unwrap();
        let id = EftConvParams::identity(&serial, 4).unwrap();
        assert_eq!(compose(&input, &base, &id, &serial).unwrap(), base);

        let parallel = EftConvSpec::new(2, 4, CompositionMode::Parallel).unwrap();
        let zero = EftConvParams {
            spatial: Some(Array4::zeros((4, 2, 3, 3))),
            pointwise: Some(Array4::zeros((4, 4, 1, 1))),
        };
        assert_eq!(compose(&input, &base, &zero, &parallel).unwrap(), base);

        // Mismatched channel counts fall back to a residual on the output.
        let narrow = sample_map((1, 2, 3, 3), 6);
        let p = EftConvParams::random(&parallel, 4, 1).unwrap();
        let expected = &base + &apply_eft_conv(&base, &p, &parallel).unwrap();
        assert_eq!(compose(&narrow, &base, &p, &parallel).unwrap(), expected);
    }

    #[test]
    fn forward_transfer_copy_is_independent() {
        let spec = EftConvSpec::serial(2, 2).unwrap();
        let original = EftConvParams::random(&spec, 4, 11).unwrap();
        let snapshot = original.clone();
        let mut copy = EftConvParams::from_previous(&original);
        assert_eq!(copy, original);
        copy.spatial.as_mut().unwrap()[[0, 0, 0, 0]] += 1.0;
        assert_eq!(original, snapshot);

        let fc = EftFcParams::identity(3);
        let mut fc_copy = EftFcParams::from_previous(&fc);
        fc_copy.e[0] = 5.0;
        assert_eq!(fc.e[0], 1.0);
    }

    #[test]
    fn random_init_is_seeded() {
        let spec = EftConvSpec::serial(4, 8).unwrap();
        let a = EftConvParams::random(&spec, 16, 7).unwrap();
        let b = EftConvParams::random(&spec, 16, 7).unwrap();
        let c = EftConvParams::random(&spec, 16, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
