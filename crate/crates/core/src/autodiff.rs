//! A minimal reverse-mode tape over dense `f64` tensors.
//!
//! The tape records exactly the operations the EFT networks need. Leaves that
//! do not require gradients (frozen parameters, inputs) are never
//! differentiated through, and ops skip computing parent gradients nobody
//! asked for.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::error::{EftError, Result};
use crate::kernels::{self, ConvGeometry};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn scalar(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

fn shape4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(EftError::dims(format!("{what}: expected rank-4 tensor, got {s:?}"))),
    }
}

fn shape2(t: &Tensor, what: &str) -> Result<[usize; 2]> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => Err(EftError::dims(format!("{what}: expected rank-2 tensor, got {s:?}"))),
    }
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        *self.value(v).iter().next().expect("empty tensor")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a custom differentiable op. `backward` receives the output
    /// gradient and a mask of which parents need gradients, and returns one
    /// entry per parent.
    pub fn record<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.requires_grad(*p));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        // Interior gradients were consumed during the sweep; leaves keep theirs.
        Gradients { grads }
    }

    // ---------------------------------------------------------------- ops

    /// Grouped 2-D convolution without bias. `w` has shape `(O, C/groups, kh, kw)`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [b, c, h, wd] = shape4(&xv, "conv2d input")?;
        let [o, cg, kh, kw] = shape4(&wv, "conv2d weight")?;
        if groups == 0 || c % groups != 0 || o % groups != 0 || cg * groups != c {
            return Err(EftError::dims(format!(
                "conv2d: input channels {c}, weight {:?}, groups {groups}",
                wv.shape()
            )));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw || stride == 0 {
            return Err(EftError::dims(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
            )));
        }
        let geo = ConvGeometry {
            batch: b,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            groups,
        };
        let mut out = vec![0.0; geo.output_len()];
        kernels::conv2d_forward(&geo, &contiguous(&xv), &contiguous(&wv), &mut out);
        let value = ArrayD::from_shape_vec(IxDyn(&[b, o, geo.out_h(), geo.out_w()]), out)
            .expect("conv output shape");
        Ok(self.record(value, &[x, w], move |g, need| {
            let g = contiguous(g);
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; geo.input_len()];
                kernels::conv2d_backward_input(&geo, &g, &contiguous(&wv), &mut gx);
                ArrayD::from_shape_vec(xv.raw_dim(), gx).expect("shape")
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; geo.weight_len()];
                kernels::conv2d_backward_weight(&geo, &contiguous(&xv), &g, &mut gw);
                ArrayD::from_shape_vec(wv.raw_dim(), gw).expect("shape")
            });
            vec![gx, gw]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(EftError::dims(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let value = &*av + &*bv;
        Ok(self.record(value, &[a, b], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let value = self.value(a).mapv(|v| v * s);
        self.record(value, &[a], move |g, _| vec![Some(g.mapv(|v| v * s))])
    }

    /// Adds a per-channel bias `b[C]` to `x[B, C, H, W]`.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let [_, c, _, _] = shape4(&xv, "channel bias input")?;
        if bv.shape() != [c] {
            return Err(EftError::dims(format!("channel bias: {:?} for {c} channels", bv.shape())));
        }
        let mut value = (*xv).clone();
        for (ci, &bias) in bv.iter().enumerate() {
            value.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bias);
        }
        Ok(self.record(value, &[x, b], move |g, need| {
            let gb = need[1].then(|| {
                let g4 = g.view().into_dimensionality::<Ix4>().expect("rank 4");
                g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
            });
            vec![need[0].then(|| g.clone()), gb]
        }))
    }

    /// `x[B, in] · w[out, in]ᵀ (+ b[out])`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [_, din] = shape2(&xv, "linear input")?;
        let [dout, win] = shape2(&wv, "linear weight")?;
        if din != win {
            return Err(EftError::dims(format!("linear: input dim {din} vs weight {:?}", wv.shape())));
        }
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let mut y = x2.dot(&w2.t());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(EftError::dims(format!("linear bias {:?} for {dout} outputs", bv.shape())));
            }
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1");
            y += &b1;
            parents.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.record(y.into_dyn(), &parents, move |g, need| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            let x2 = xv.view().into_dimensionality::<Ix2>().expect("rank 2");
            let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut out = vec![
                need[0].then(|| g2.dot(&w2).into_dyn()),
                need[1].then(|| g2.t().dot(&x2).into_dyn()),
            ];
            if has_bias {
                out.push(need[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            out
        }))
    }

    /// Hadamard product of each row of `x[B, d]` with `e[d]`.
    pub fn mul_columns(&self, x: Var, e: Var) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        let [_, d] = shape2(&xv, "diagonal calibration input")?;
        if ev.shape() != [d] {
            return Err(EftError::dims(format!(
                "diagonal calibration: vector {:?} for feature dim {d}",
                ev.shape()
            )));
        }
        let e1 = ev.view().into_dimensionality::<ndarray::Ix1>().expect("rank 1").to_owned();
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let y = &x2 * &e1;
        Ok(self.record(y.into_dyn(), &[x, e], move |g, need| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("rank 2");
            let gx = need[0].then(|| (&g2 * &e1).into_dyn());
            let ge = need[1].then(|| {
                let x2 = xv.view().into_dimensionality::<Ix2>().expect("rank 2");
                (&g2 * &x2).sum_axis(Axis(0)).into_dyn()
            });
            vec![gx, ge]
        }))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let value = xv.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.record(value, &[x], move |g, _| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx)
                .and(&*xv)
                .for_each(|gi, &xi| {
                    if xi <= 0.0 {
                        *gi *= slope
                    }
                });
            vec![Some(gx)]
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        let y = self.value(x).mapv(f64::tanh);
        let yc = y.clone();
        self.record(y, &[x], move |g, _| {
            let mut gx = g.clone();
            ndarray::Zip::from(&mut gx).and(&yc).for_each(|gi, &yi| *gi *= 1.0 - yi * yi);
            vec![Some(gx)]
        })
    }

    /// Non-overlapping `k x k` max pooling (floor mode).
    pub fn max_pool(&self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(&xv, "max_pool input")?;
        if k == 0 || h < k || w < k {
            return Err(EftError::dims(format!("max_pool {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = contiguous(&xv);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = (oy * k + ky) * w + ox * k + kx;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (bc * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = bc * h * w + best_i;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("shape");
        let in_len = xv.len();
        Ok(self.record(value, &[x], move |g, _| {
            let mut gx = vec![0.0; in_len];
            for (gi, &src) in g.iter().zip(&argmax) {
                gx[src] += gi;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), gx).expect("shape"))]
        }))
    }

    /// Mean over spatial positions: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(&xv, "global_avg_pool input")?;
        let n = (h * w) as f64;
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("rank 4");
        let value = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / n);
        Ok(self.record(value.into_dyn(), &[x], move |g, _| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    let v = g[[bi, ci]] / n;
                    gx.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .fill(v);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(&xv, "upsample input")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut value = ArrayD::zeros(IxDyn(&[b, c, oh, ow]));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        value[[bi, ci, y, xx]] = xv[[bi, ci, y / factor, xx / factor]];
                    }
                }
            }
        }
        Ok(self.record(value, &[x], move |g, _| {
            let mut gx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[[bi, ci, y / factor, xx / factor]] += g[[bi, ci, y, xx]];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let value = contiguous(&xv)
            .into_owned();
        let value = ArrayD::from_shape_vec(IxDyn(shape), value).map_err(|_| {
            EftError::dims(format!("reshape {in_shape:?} -> {shape:?}"))
        })?;
        Ok(self.record(value, &[x], move |g, _| {
            let flat = contiguous(g).into_owned();
            vec![Some(ArrayD::from_shape_vec(IxDyn(&in_shape), flat).expect("shape"))]
        }))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Batch normalisation with batch statistics. Returns the output and the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let xv = self.value(x);
        let [b, c, h, w] = shape4(&xv, "batch_norm input")?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(EftError::dims(format!("batch_norm params for {c} channels")));
        }
        let m = (b * h * w) as f64;
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("rank 4");
        let mean = x4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let mu = mean[ci];
            var[ci] = x4
                .index_axis(Axis(1), ci)
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>()
                / m;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = x4.to_owned();
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (gm, bt) = (gv[ci], bv[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * gm + bt);
        }
        let gv = (*gv).clone();
        let inv = inv_std.clone();
        let out = self.record(y.into_dyn(), &[x, gamma, beta], move |g, need| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let sum_g = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let prod = &g4 * &xhat;
            let sum_gx = prod.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let gx = need[0].then(|| {
                let mut gx = g4.to_owned();
                for ci in 0..c {
                    let k = gv[ci] * inv[ci] / m;
                    let (sg, sgx) = (sum_g[ci], sum_gx[ci]);
                    let xh = xhat.index_axis(Axis(1), ci);
                    ndarray::Zip::from(gx.index_axis_mut(Axis(1), ci))
                        .and(&xh)
                        .for_each(|gi, &xi| *gi = k * (m * *gi - sg - xi * sgx));
                }
                gx.into_dyn()
            });
            vec![gx, need[1].then(|| sum_gx.into_dyn()), need[2].then(|| sum_g.into_dyn())]
        });
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [_, c, _, _] = shape4(&xv, "batch_norm input")?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(EftError::dims(format!("batch_norm params for {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm: Vec<f64> = running_mean.iter().copied().collect();
        let mut y = (*xv).clone();
        for ci in 0..c {
            let (mu, is, gm, bt) = (rm[ci], inv_std[ci], gv[ci], bv[ci]);
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mu) * is * gm + bt);
        }
        let gv = (*gv).clone();
        Ok(self.record(y, &[x, gamma, beta], move |g, need| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("rank 4");
            let gx = need[0].then(|| {
                let mut gx = g4.to_owned();
                for ci in 0..c {
                    let k = gv[ci] * inv_std[ci];
                    gx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * k);
                }
                gx.into_dyn()
            });
            let ggamma = need[1].then(|| {
                let x4 = xv.view().into_dimensionality::<Ix4>().expect("rank 4");
                let mut out = Array1::zeros(c);
                for ci in 0..c {
                    let (mu, is) = (rm[ci], inv_std[ci]);
                    out[ci] = g4
                        .index_axis(Axis(1), ci)
                        .iter()
                        .zip(x4.index_axis(Axis(1), ci).iter())
                        .map(|(gi, xi)| gi * (xi - mu) * is)
                        .sum();
                }
                out.into_dyn()
            });
            let gbeta = need[2]
                .then(|| g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Mean softmax cross-entropy of `logits[B, C]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, c] = shape2(&lv, "cross_entropy logits")?;
        if labels.len() != b {
            return Err(EftError::dims(format!("cross_entropy: {b} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(EftError::LabelOutOfRange { label: bad, classes: c });
        }
        let l2 = lv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let mut probs = Array2::zeros((b, c));
        let mut loss = 0.0;
        for (i, row) in l2.outer_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + denom.ln();
            loss += log_z - row[labels[i]];
            for j in 0..c {
                probs[[i, j]] = (row[j] - log_z).exp();
            }
        }
        let labels = labels.to_vec();
        Ok(self.record(scalar(loss / b as f64), &[logits], move |g, _| {
            let s = g.iter().next().copied().unwrap_or(1.0) / b as f64;
            let mut gl = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                gl[[i, y]] -= 1.0;
            }
            gl.mapv_inplace(|v| v * s);
            vec![Some(gl.into_dyn())]
        }))
    }

    /// Mean binary cross-entropy of raw logits against a constant target.
    pub fn bce_with_logits(&self, logits: Var, target: f64) -> Var {
        let lv = self.value(logits);
        let n = lv.len() as f64;
        let loss: f64 = lv
            .iter()
            .map(|&z| z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n;
        self.record(scalar(loss), &[logits], move |g, _| {
            let s = g.iter().next().copied().unwrap_or(1.0) / n;
            vec![Some(lv.mapv(|z| (1.0 / (1.0 + (-z).exp()) - target) * s))]
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.raw_dim();
        self.record(scalar(xv.sum()), &[x], move |g, _| {
            let s = g.iter().next().copied().unwrap_or(1.0);
            vec![Some(ArrayD::from_elem(shape.clone(), s))]
        })
    }

    /// `Σ x ⊙ weights` for a fixed weight tensor of the same shape.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(EftError::dims(format!(
                "weighted_sum: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let value = (&*xv * weights).sum();
        let w = weights.clone();
        Ok(self.record(scalar(value), &[x], move |g, _| {
            let s = g.iter().next().copied().unwrap_or(1.0);
            vec![Some(w.mapv(|v| v * s))]
        }))
    }
}
