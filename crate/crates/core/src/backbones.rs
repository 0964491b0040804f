//! Base architectures, the EFT insertion policy and the task-conditioned
//! forward pass.
//!
//! Insertion policy: every convolution flagged `adapt` (all convolutions of
//! the classifiers, including residual shortcut convolutions) gets one EFT
//! applied to its output before normalisation and activation, and every fully
//! connected layer flagged `calibrate` (the penultimate FC) gets a diagonal
//! calibration. Sites are numbered in depth-first order, residual bodies
//! before shortcuts.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Ix2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::eft::{compose_on_tape, EftConvSpec, FeatureMap, SiteVars};
use crate::error::{EftError, Result};
use crate::registry::{GlobalParams, TaskHead, TaskParams};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    /// Receives an EFT site.
    pub adapt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Receives a diagonal calibration site.
    pub calibrate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum Layer {
    Conv(ConvLayer),
    Norm { channels: usize },
    Activation(Activation),
    MaxPool { size: usize },
    GlobalAvgPool,
    Upsample { factor: usize },
    Flatten,
    Reshape { shape: [usize; 3] },
    Fc(FcLayer),
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Layer>, shortcut: Vec<Layer> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map([usize; 3]),
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match self {
            Shape::Map([c, h, w]) => c * h * w,
            Shape::Flat(d) => *d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteKind {
    Conv,
    Fc,
}

/// One EFT insertion site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub path: String,
    pub kind: SiteKind,
    /// Channel count `K` (conv) or feature dimension `d` (FC).
    pub width: usize,
    /// Spatial size of the site's feature map (1x1 for FC sites).
    pub out_hw: (usize, usize),
    /// Spatial size of the convolution's input.
    pub in_hw: (usize, usize),
    pub in_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    /// Default per-task head size used for accounting; `None` when the
    /// network output is not classified (a generator).
    pub head_classes: Option<usize>,
}

pub const ARCH_NAMES: [&str; 5] = ["smallcnn", "resnet18-cifar", "lenet", "gan-generator", "gan-discriminator"];

/// Builds a named architecture at its default input shape.
pub fn build_arch(name: &str) -> Result<ArchSpec> {
    let shape = match name {
        "smallcnn" | "resnet18-cifar" => [3, 32, 32],
        "lenet" => [1, 28, 28],
        "gan-generator" => [GAN_NOISE_DIM, 1, 1],
        "gan-discriminator" => [1, 8, 8],
        other => return Err(EftError::UnknownArchitecture(other.to_string())),
    };
    build_arch_for_input(name, shape)
}

pub const GAN_NOISE_DIM: usize = 8;

/// Builds a named architecture for a specific `(channels, height, width)` input.
pub fn build_arch_for_input(name: &str, input_shape: [usize; 3]) -> Result<ArchSpec> {
    let layers = match name {
        "smallcnn" => smallcnn_layers(input_shape),
        "resnet18-cifar" => resnet18_layers(input_shape[0]),
        "lenet" => lenet_layers(input_shape),
        "gan-generator" => generator_layers(input_shape[0]),
        "gan-discriminator" => discriminator_layers(input_shape),
        other => return Err(EftError::UnknownArchitecture(other.to_string())),
    };
    let head_classes = match name {
        "gan-generator" => None,
        "gan-discriminator" => Some(1),
        _ => Some(10),
    };
    let arch = ArchSpec {
        name: name.to_string(),
        input_shape,
        layers,
        head_classes,
    };
    arch.output_shape()?;
    Ok(arch)
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Layer {
    Layer::Conv(ConvLayer {
        in_channels,
        out_channels,
        kernel,
        stride,
        padding: kernel / 2,
        bias,
        adapt: true,
    })
}

pub const SMALLCNN_CHANNELS: [usize; 4] = [32, 64, 128, 128];
pub const SMALLCNN_FEATURE_DIM: usize = 64;

fn smallcnn_layers([c, mut h, mut w]: [usize; 3]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut in_c = c;
    for &out in &SMALLCNN_CHANNELS {
        layers.push(conv(in_c, out, 3, 1, false));
        layers.push(Layer::Norm { channels: out });
        layers.push(Layer::Activation(Activation::Relu));
        if h >= 2 && w >= 2 {
            layers.push(Layer::MaxPool { size: 2 });
            h /= 2;
            w /= 2;
        }
        in_c = out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Fc(FcLayer {
        in_dim: in_c,
        out_dim: SMALLCNN_FEATURE_DIM,
        calibrate: true,
    }));
    layers.push(Layer::Activation(Activation::Relu));
    layers
}

fn basic_block(in_c: usize, out_c: usize, stride: usize) -> Vec<Layer> {
    let body = vec![
        conv(in_c, out_c, 3, stride, false),
        Layer::Norm { channels: out_c },
        Layer::Activation(Activation::Relu),
        conv(out_c, out_c, 3, 1, false),
        Layer::Norm { channels: out_c },
    ];
    let shortcut = if stride != 1 || in_c != out_c {
        vec![conv(in_c, out_c, 1, stride, false), Layer::Norm { channels: out_c }]
    } else {
        Vec::new()
    };
    vec![Layer::Residual { body, shortcut }, Layer::Activation(Activation::Relu)]
}

fn resnet18_layers(in_c: usize) -> Vec<Layer> {
    let mut layers = vec![
        conv(in_c, 64, 3, 1, false),
        Layer::Norm { channels: 64 },
        Layer::Activation(Activation::Relu),
    ];
    let mut c = 64;
    for (out, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
        layers.extend(basic_block(c, out, stride));
        layers.extend(basic_block(out, out, 1));
        c = out;
    }
    layers.push(Layer::GlobalAvgPool);
    layers
}

fn lenet_layers([c, h, w]: [usize; 3]) -> Vec<Layer> {
    let valid = |n: usize| (n - 4) / 2;
    let flat = 50 * valid(valid(h)) * valid(valid(w));
    vec![
        Layer::Conv(ConvLayer { in_channels: c, out_channels: 20, kernel: 5, stride: 1, padding: 0, bias: true, adapt: true }),
        Layer::Activation(Activation::Relu),
        Layer::MaxPool { size: 2 },
        Layer::Conv(ConvLayer { in_channels: 20, out_channels: 50, kernel: 5, stride: 1, padding: 0, bias: true, adapt: true }),
        Layer::Activation(Activation::Relu),
        Layer::MaxPool { size: 2 },
        Layer::Flatten,
        Layer::Fc(FcLayer { in_dim: flat, out_dim: 500, calibrate: true }),
        Layer::Activation(Activation::Relu),
    ]
}

// The image-producing convolution has 1 output channel, so it stays global.
fn generator_layers(noise: usize) -> Vec<Layer> {
    vec![
        Layer::Flatten,
        Layer::Fc(FcLayer { in_dim: noise, out_dim: 32 * 2 * 2, calibrate: false }),
        Layer::Reshape { shape: [32, 2, 2] },
        Layer::Norm { channels: 32 },
        Layer::Activation(Activation::Relu),
        Layer::Upsample { factor: 2 },
        conv(32, 16, 3, 1, false),
        Layer::Norm { channels: 16 },
        Layer::Activation(Activation::Relu),
        Layer::Upsample { factor: 2 },
        Layer::Conv(ConvLayer { in_channels: 16, out_channels: 1, kernel: 3, stride: 1, padding: 1, bias: true, adapt: false }),
        Layer::Activation(Activation::Tanh),
    ]
}

fn discriminator_layers([c, _, _]: [usize; 3]) -> Vec<Layer> {
    vec![
        conv(c, 16, 3, 2, false),
        Layer::Activation(Activation::LeakyRelu { slope: 0.2 }),
        conv(16, 32, 3, 2, false),
        Layer::Norm { channels: 32 },
        Layer::Activation(Activation::LeakyRelu { slope: 0.2 }),
        Layer::Flatten,
    ]
}

/// Per-layer record handed to [`ArchSpec::walk`] visitors.
pub struct LayerVisit<'a> {
    pub path: &'a str,
    pub layer: &'a Layer,
    pub input: Shape,
    pub output: Shape,
}

impl ArchSpec {
    /// Visits every layer depth-first with its input and output shapes,
    /// validating that consecutive shapes compose.
    pub fn walk(&self, visit: &mut dyn FnMut(&LayerVisit<'_>)) -> Result<Shape> {
        walk_layers(&self.layers, "", Shape::Map(self.input_shape), visit)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        self.walk(&mut |_| {})
    }

    /// Flattened dimension of the features fed to the task head.
    pub fn feature_dim(&self) -> usize {
        self.output_shape().map(|s| s.numel()).unwrap_or(0)
    }

    pub fn sites(&self) -> Vec<SiteInfo> {
        let mut sites = Vec::new();
        let _ = self.walk(&mut |v| match (v.layer, v.input, v.output) {
            (Layer::Conv(c), Shape::Map([_, ih, iw]), Shape::Map([_, oh, ow])) if c.adapt => {
                sites.push(SiteInfo {
                    path: v.path.to_string(),
                    kind: SiteKind::Conv,
                    width: c.out_channels,
                    out_hw: (oh, ow),
                    in_hw: (ih, iw),
                    in_channels: c.in_channels,
                })
            }
            (Layer::Fc(f), _, _) if f.calibrate => sites.push(SiteInfo {
                path: v.path.to_string(),
                kind: SiteKind::Fc,
                width: f.out_dim,
                out_hw: (1, 1),
                in_hw: (1, 1),
                in_channels: f.in_dim,
            }),
            _ => {}
        });
        sites
    }

    pub fn conv_sites(&self) -> Vec<SiteInfo> {
        self.sites().into_iter().filter(|s| s.kind == SiteKind::Conv).collect()
    }

    pub fn fc_sites(&self) -> Vec<SiteInfo> {
        self.sites().into_iter().filter(|s| s.kind == SiteKind::Fc).collect()
    }

    /// Channel counts of the convolutional sites, in site order.
    pub fn conv_site_channels(&self) -> Vec<usize> {
        self.conv_sites().iter().map(|s| s.width).collect()
    }

    /// Names, shapes and trainability class of every global tensor.
    pub fn global_tensor_shapes(&self) -> Vec<(String, Vec<usize>, TensorRole)> {
        let mut out = Vec::new();
        let _ = self.walk(&mut |v| match v.layer {
            Layer::Conv(c) => {
                out.push((
                    format!("{}.weight", v.path),
                    vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                    TensorRole::ConvWeight,
                ));
                if c.bias {
                    out.push((format!("{}.bias", v.path), vec![c.out_channels], TensorRole::Bias));
                }
            }
            Layer::Norm { channels } => {
                out.push((format!("{}.gamma", v.path), vec![*channels], TensorRole::NormScale));
                out.push((format!("{}.beta", v.path), vec![*channels], TensorRole::Bias));
                out.push((format!("{}.running_mean", v.path), vec![*channels], TensorRole::RunningMean));
                out.push((format!("{}.running_var", v.path), vec![*channels], TensorRole::RunningVar));
            }
            Layer::Fc(f) => {
                out.push((format!("{}.weight", v.path), vec![f.out_dim, f.in_dim], TensorRole::FcWeight));
                out.push((format!("{}.bias", v.path), vec![f.out_dim], TensorRole::Bias));
            }
            _ => {}
        });
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    FcWeight,
    Bias,
    NormScale,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    /// Running statistics are buffers, not learned parameters.
    pub fn is_buffer(&self) -> bool {
        matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

fn walk_layers(
    layers: &[Layer],
    prefix: &str,
    mut shape: Shape,
    visit: &mut dyn FnMut(&LayerVisit<'_>),
) -> Result<Shape> {
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}{i}");
        let out = match (layer, shape) {
            (Layer::Conv(c), Shape::Map([ch, h, w])) => {
                if ch != c.in_channels {
                    return Err(EftError::dims(format!(
                        "layer {path}: conv expects {} channels, got {ch}",
                        c.in_channels
                    )));
                }
                if h + 2 * c.padding < c.kernel || w + 2 * c.padding < c.kernel || c.stride == 0 {
                    return Err(EftError::dims(format!("layer {path}: kernel does not fit {h}x{w}")));
                }
                Shape::Map([
                    c.out_channels,
                    (h + 2 * c.padding - c.kernel) / c.stride + 1,
                    (w + 2 * c.padding - c.kernel) / c.stride + 1,
                ])
            }
            (Layer::Norm { channels }, Shape::Map([ch, _, _])) if *channels == ch => shape,
            (Layer::Activation(_), s) => s,
            (Layer::MaxPool { size }, Shape::Map([ch, h, w])) if h >= *size && w >= *size => {
                Shape::Map([ch, h / size, w / size])
            }
            (Layer::GlobalAvgPool, Shape::Map([ch, _, _])) => Shape::Flat(ch),
            (Layer::Upsample { factor }, Shape::Map([ch, h, w])) => Shape::Map([ch, h * factor, w * factor]),
            (Layer::Flatten, s) => Shape::Flat(s.numel()),
            (Layer::Reshape { shape: target }, s) if s.numel() == target.iter().product::<usize>() => {
                Shape::Map(*target)
            }
            (Layer::Fc(f), Shape::Flat(d)) if d == f.in_dim => Shape::Flat(f.out_dim),
            (Layer::Residual { body, shortcut }, s) => {
                let b = walk_layers(body, &format!("{path}.body."), s, visit)?;
                let sc = walk_layers(shortcut, &format!("{path}.shortcut."), s, visit)?;
                if b != sc {
                    return Err(EftError::dims(format!(
                        "layer {path}: residual body {b:?} vs shortcut {sc:?}"
                    )));
                }
                b
            }
            (layer, s) => {
                return Err(EftError::dims(format!(
                    "layer {path}: {layer:?} cannot consume {s:?}"
                )))
            }
        };
        visit(&LayerVisit {
            path: &path,
            layer,
            input: shape,
            output: out,
        });
        shape = out;
    }
    Ok(shape)
}

/// How normalisation layers obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics (global parameters still being learned).
    Batch,
    /// Frozen running statistics.
    Running,
}

/// Global tensors bound to tape leaves.
pub struct BoundGlobal<'g> {
    pub global: &'g GlobalParams,
    vars: BTreeMap<String, Var>,
}

impl<'g> BoundGlobal<'g> {
    pub fn bind(tape: &Tape, global: &'g GlobalParams, trainable: bool) -> Self {
        let vars = global
            .iter()
            .filter(|(name, _)| !is_buffer_name(name))
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Self { global, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| EftError::dims(format!("missing global tensor `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Task parameters bound to tape leaves.
pub struct BoundTask {
    pub conv: Vec<SiteVars>,
    pub fc: Vec<Var>,
    pub head: Option<(Var, Var)>,
}

impl BoundTask {
    pub fn bind(tape: &Tape, task: &TaskParams, trainable: bool) -> Self {
        let conv = task
            .conv
            .iter()
            .map(|p| SiteVars {
                spatial: p.spatial.as_ref().map(|w| tape.leaf(w.clone().into_dyn(), trainable)),
                pointwise: p.pointwise.as_ref().map(|w| tape.leaf(w.clone().into_dyn(), trainable)),
            })
            .collect();
        let fc = task
            .fc
            .iter()
            .map(|p| tape.leaf(p.e.clone().into_dyn(), trainable))
            .collect();
        let head = task.head.as_ref().map(|h| bind_head(tape, h, trainable));
        Self { conv, fc, head }
    }

    /// Tape handles in [`TaskParams::named_tensors`] order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, s) in self.conv.iter().enumerate() {
            if let Some(v) = s.spatial {
                out.push((format!("site{i}.spatial"), v));
            }
            if let Some(v) = s.pointwise {
                out.push((format!("site{i}.pointwise"), v));
            }
        }
        for (i, v) in self.fc.iter().enumerate() {
            out.push((format!("fc{i}.e"), *v));
        }
        if let Some((w, b)) = self.head {
            out.push(("head.weight".to_string(), w));
            out.push(("head.bias".to_string(), b));
        }
        out
    }
}

pub fn bind_head(tape: &Tape, head: &TaskHead, trainable: bool) -> (Var, Var) {
    (
        tape.leaf(head.weight.clone().into_dyn(), trainable),
        tape.leaf(head.bias.clone().into_dyn(), trainable),
    )
}

/// Batch statistics observed by one norm layer.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub path: String,
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

/// Output of [`run_layers`].
pub struct LayersOutput {
    pub out: Var,
    /// Statistics of every norm layer run in [`NormMode::Batch`].
    pub norm_stats: Vec<NormStats>,
}

struct WalkCtx<'a> {
    tape: &'a Tape,
    global: &'a BoundGlobal<'a>,
    task: Option<&'a BoundTask>,
    spec: &'a EftConvSpec,
    mode: NormMode,
    conv_site: usize,
    fc_site: usize,
    norm_stats: Vec<NormStats>,
}

/// Runs the base layers with EFTs composed at every site. With `task = None`
/// the EFT-free base network is run.
pub fn run_layers(
    tape: &Tape,
    arch: &ArchSpec,
    global: &BoundGlobal<'_>,
    task: Option<&BoundTask>,
    spec: &EftConvSpec,
    x: Var,
    mode: NormMode,
) -> Result<LayersOutput> {
    let in_shape = tape.value(x).shape().to_vec();
    if in_shape.len() != 4 || in_shape[1..] != arch.input_shape {
        return Err(EftError::dims(format!(
            "input {in_shape:?} does not match {} input shape {:?}",
            arch.name, arch.input_shape
        )));
    }
    if let Some(t) = task {
        let (nc, nf) = (arch.conv_sites().len(), arch.fc_sites().len());
        if t.conv.len() != nc || t.fc.len() != nf {
            return Err(EftError::dims(format!(
                "task parameters have {} conv / {} fc sites, {} needs {nc} / {nf}",
                t.conv.len(),
                t.fc.len(),
                arch.name
            )));
        }
    }
    let mut ctx = WalkCtx {
        tape,
        global,
        task,
        spec,
        mode,
        conv_site: 0,
        fc_site: 0,
        norm_stats: Vec::new(),
    };
    let out = run_seq(&mut ctx, &arch.layers, "", x)?;
    Ok(LayersOutput {
        out,
        norm_stats: ctx.norm_stats,
    })
}

fn run_seq(ctx: &mut WalkCtx<'_>, layers: &[Layer], prefix: &str, mut x: Var) -> Result<Var> {
    let tape = ctx.tape;
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}{i}");
        x = match layer {
            Layer::Conv(c) => {
                let w = ctx.global.var(&format!("{path}.weight"))?;
                let mut y = tape.conv2d(x, w, c.stride, c.padding, 1)?;
                if c.bias {
                    y = tape.add_channel_bias(y, ctx.global.var(&format!("{path}.bias"))?)?;
                }
                if c.adapt {
                    if let Some(task) = ctx.task {
                        y = compose_on_tape(tape, x, y, task.conv[ctx.conv_site], ctx.spec)?;
                    }
                    ctx.conv_site += 1;
                }
                y
            }
            Layer::Norm { .. } => {
                let gamma = ctx.global.var(&format!("{path}.gamma"))?;
                let beta = ctx.global.var(&format!("{path}.beta"))?;
                match ctx.mode {
                    NormMode::Batch => {
                        let shape = tape.value(x).shape().to_vec();
                        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, NORM_EPS)?;
                        ctx.norm_stats.push(NormStats {
                            path: path.clone(),
                            mean,
                            var,
                            count: shape[0] * shape[2] * shape[3],
                        });
                        y
                    }
                    NormMode::Running => {
                        let rm = ctx.global.global.require(&format!("{path}.running_mean"))?;
                        let rv = ctx.global.global.require(&format!("{path}.running_var"))?;
                        tape.batch_norm_eval(x, gamma, beta, rm, rv, NORM_EPS)?
                    }
                }
            }
            Layer::Activation(Activation::Relu) => tape.relu(x),
            Layer::Activation(Activation::LeakyRelu { slope }) => tape.leaky_relu(x, *slope),
            Layer::Activation(Activation::Tanh) => tape.tanh(x),
            Layer::MaxPool { size } => tape.max_pool(x, *size)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::Upsample { factor } => tape.upsample_nearest(x, *factor)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::Reshape { shape } => {
                let b = tape.value(x).shape()[0];
                tape.reshape(x, &[b, shape[0], shape[1], shape[2]])?
            }
            Layer::Fc(f) => {
                let w = ctx.global.var(&format!("{path}.weight"))?;
                let b = ctx.global.var(&format!("{path}.bias"))?;
                let mut y = tape.linear(x, w, Some(b))?;
                if f.calibrate {
                    if let Some(task) = ctx.task {
                        y = tape.mul_columns(y, task.fc[ctx.fc_site])?;
                    }
                    ctx.fc_site += 1;
                }
                y
            }
            Layer::Residual { body, shortcut } => {
                let b = run_seq(ctx, body, &format!("{path}.body."), x)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    run_seq(ctx, shortcut, &format!("{path}.shortcut."), x)?
                };
                tape.add(b, s)?
            }
        };
    }
    Ok(x)
}

/// Output of a classifier forward pass.
pub struct ClassifierOutput {
    pub logits: Var,
    /// Penultimate (pre-head) features, `[B, feature_dim]`.
    pub features: Var,
    pub norm_stats: Vec<NormStats>,
}

/// Layers, then flatten, then the task head `(weight, bias)`.
#[allow(clippy::too_many_arguments)]
pub fn classifier_on_tape(
    tape: &Tape,
    arch: &ArchSpec,
    global: &BoundGlobal<'_>,
    task: Option<&BoundTask>,
    head: (Var, Var),
    spec: &EftConvSpec,
    x: Var,
    mode: NormMode,
) -> Result<ClassifierOutput> {
    let out = run_layers(tape, arch, global, task, spec, x, mode)?;
    let features = if tape.value(out.out).ndim() == 2 {
        out.out
    } else {
        tape.flatten(out.out)?
    };
    let logits = tape.linear(features, head.0, Some(head.1))?;
    Ok(ClassifierOutput {
        logits,
        features,
        norm_stats: out.norm_stats,
    })
}

fn to_tensor(x: &FeatureMap) -> Tensor {
    x.clone().into_dyn()
}

fn to_matrix(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank 2").to_owned()
}

/// Inference forward with frozen statistics: `(logits, features)`.
pub fn forward_with_features(
    x: &FeatureMap,
    arch: &ArchSpec,
    global: &GlobalParams,
    task: &TaskParams,
    spec: &EftConvSpec,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let head = task
        .head
        .as_ref()
        .ok_or_else(|| EftError::dims(format!("task {} has no head", task.task_id)))?;
    let tape = Tape::new();
    let bg = BoundGlobal::bind(&tape, global, false);
    let bt = BoundTask::bind(&tape, task, false);
    let xv = tape.constant(to_tensor(x));
    let h = bind_head(&tape, head, false);
    let out = classifier_on_tape(&tape, arch, &bg, Some(&bt), h, spec, xv, NormMode::Running)?;
    Ok((to_matrix(&tape.value(out.logits)), to_matrix(&tape.value(out.features))))
}

/// Logits of `x` under `(θ, τ)`.
pub fn forward(
    x: &FeatureMap,
    arch: &ArchSpec,
    global: &GlobalParams,
    task: &TaskParams,
    spec: &EftConvSpec,
) -> Result<Array2<f64>> {
    forward_with_features(x, arch, global, task, spec).map(|(l, _)| l)
}

/// Logits of the EFT-free base network followed by `head`.
pub fn forward_base(
    x: &FeatureMap,
    arch: &ArchSpec,
    global: &GlobalParams,
    head: &TaskHead,
    spec: &EftConvSpec,
) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let bg = BoundGlobal::bind(&tape, global, false);
    let xv = tape.constant(to_tensor(x));
    let h = bind_head(&tape, head, false);
    let out = classifier_on_tape(&tape, arch, &bg, None, h, spec, xv, NormMode::Running)?;
    Ok(to_matrix(&tape.value(out.logits)))
}
