//! Feature-distance maximisation between the current task's penultimate
//! feature distribution and those produced by earlier tasks' parameters.
//!
//! Distributions are diagonal Gaussians, so the KL divergence is closed form
//! and the hinge `Σ_i max(Δ − KL(P_t ‖ Q_i), 0)` has an analytic gradient with
//! respect to the features that produced `P_t`.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EftError, Result};

/// Lower bound applied to every variance before it enters a KL term.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-dimension mean and (floored) population variance of `features[B, d]`.
pub fn fit_gaussian(features: ArrayView2<f64>) -> Result<GaussianStats> {
    let (b, _) = features.dim();
    if b < 2 {
        return Err(EftError::TooFewSamples { needed: 2, got: b });
    }
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let mut var = Array1::<f64>::zeros(mean.len());
    for row in features.rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.mapv_inplace(|v| (v / b as f64).max(VAR_FLOOR));
    Ok(GaussianStats {
        mean: mean.to_vec(),
        var: var.to_vec(),
        count: b,
    })
}

/// `KL(P ‖ Q)` between diagonal Gaussians.
pub fn kl_diag(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(EftError::dims(format!("KL between {}-d and {}-d Gaussians", p.dim(), q.dim())));
    }
    let mut kl = 0.0;
    for j in 0..p.dim() {
        let (vp, vq) = (p.var[j].max(VAR_FLOOR), q.var[j].max(VAR_FLOOR));
        let dm = p.mean[j] - q.mean[j];
        kl += (vq / vp).ln() + (vp + dm * dm) / vq - 1.0;
    }
    Ok(0.5 * kl)
}

/// `Σ_i max(Δ − KL(P ‖ Q_i), 0)`; zero for an empty prior list.
pub fn margin_loss(p: &GaussianStats, prior: &[GaussianStats], delta: f64) -> Result<f64> {
    prior
        .iter()
        .map(|q| kl_diag(p, q).map(|kl| (delta - kl).max(0.0)))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    /// Re-encode the current batch under each earlier task's parameters.
    #[default]
    Reencode,
    /// Use feature statistics stored when each earlier task was finalized.
    Stored,
}

impl FromStr for PriorSource {
    type Err = EftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reencode" => Ok(Self::Reencode),
            "stored" => Ok(Self::Stored),
            other => Err(EftError::Config(format!("unknown prior source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    pub lambda: f64,
    pub delta: f64,
    pub prior_source: PriorSource,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            delta: 1.0,
            prior_source: PriorSource::Reencode,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(EftError::Config(format!("margin.delta must be > 0, got {}", self.delta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EftError::Config(format!("margin.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lm: f64,
    pub total: f64,
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(EftError::dims(format!("{b} logit rows, {} labels", labels.len())));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        if y >= c {
            return Err(EftError::LabelOutOfRange { label: y, classes: c });
        }
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / b as f64)
}

/// `ce + λ·lm` evaluated without a tape.
pub fn joint_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
    p: &GaussianStats,
    prior: &[GaussianStats],
    cfg: &MarginConfig,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, labels)?;
    let lm = margin_loss(p, prior, cfg.delta)?;
    Ok(LossBreakdown {
        ce,
        lm,
        total: ce + cfg.lambda * lm,
    })
}

/// Differentiable margin loss of the Gaussian fitted to `features[B, d]`.
pub fn margin_loss_on_tape(tape: &Tape, features: Var, prior: &[GaussianStats], delta: f64) -> Result<Var> {
    let fv = tape.value(features);
    let x: Array2<f64> = fv
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| EftError::dims("margin features must be rank 2"))?
        .to_owned();
    let (b, d) = x.dim();
    let p_raw = {
        let mean = x.mean_axis(Axis(0)).ok_or(EftError::TooFewSamples { needed: 2, got: b })?;
        let var = x.var_axis(Axis(0), 0.0);
        (mean, var)
    };
    let p = fit_gaussian(x.view())?;
    if let Some(q) = prior.iter().find(|q| q.dim() != d) {
        return Err(EftError::dims(format!("prior Gaussian is {}-d, features are {d}-d", q.dim())));
    }
    let mut loss = 0.0;
    let mut g_mu = Array1::<f64>::zeros(d);
    let mut g_var = Array1::<f64>::zeros(d);
    for q in prior {
        let kl = kl_diag(&p, q)?;
        if kl >= delta {
            continue;
        }
        loss += delta - kl;
        for j in 0..d {
            let vq = q.var[j].max(VAR_FLOOR);
            g_mu[j] -= (p.mean[j] - q.mean[j]) / vq;
            if p_raw.1[j] > VAR_FLOOR {
                g_var[j] -= 0.5 * (1.0 / vq - 1.0 / p.var[j]);
            }
        }
    }
    let mean = p_raw.0;
    let out = ndarray::arr0(loss).into_dyn();
    Ok(tape.record(out, &[features], move |g, need| {
        if !need[0] {
            return vec![None];
        }
        let s = g.iter().next().copied().unwrap_or(0.0);
        let mut gx = Array2::<f64>::zeros((b, d));
        for ((n, j), v) in gx.indexed_iter_mut() {
            *v = s * (g_mu[j] + 2.0 * g_var[j] * (x[[n, j]] - mean[j])) / b as f64;
        }
        vec![Some(gx.into_dyn())]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(mean: &[f64], var: &[f64]) -> GaussianStats {
        GaussianStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count: 2,
        }
    }

    #[test]
    fn fit_simple_cases() {
        let g = fit_gaussian(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(g.mean, vec![1.0]);
        assert_eq!(g.var, vec![1.0]);
        let c = fit_gaussian(array![[3.0, -1.0], [3.0, -1.0], [3.0, -1.0]].view()).unwrap();
        assert_eq!(c.mean, vec![3.0, -1.0]);
        assert_eq!(c.var, vec![VAR_FLOOR, VAR_FLOOR]);
        assert!(fit_gaussian(array![[1.0]].view()).is_err());
    }

    #[test]
    fn analytic_kl() {
        let p = stats(&[0.0], &[1.0]);
        let q = stats(&[1.0], &[1.0]);
        assert!((kl_diag(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(kl_diag(&p, &p).unwrap(), 0.0);
        assert!(kl_diag(&p, &stats(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn hinge_arithmetic() {
        // Q at mean offset m with unit variances gives KL = m²/2.
        let p = stats(&[0.0], &[1.0]);
        let far = stats(&[2.0], &[1.0]); // KL = 2.0
        let near = stats(&[0.8_f64.sqrt()], &[1.0]); // KL = 0.4
        let lm = margin_loss(&p, &[far, near], 1.0).unwrap();
        assert!((lm - 0.6).abs() < 1e-12);
        assert_eq!(margin_loss(&p, &[], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn joint_loss_without_margin_weight_is_ce() {
        let logits = array![[2.0, -1.0], [0.0, 0.5]];
        let p = fit_gaussian(logits.view()).unwrap();
        let q = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let cfg = MarginConfig {
            lambda: 0.0,
            ..MarginConfig::default()
        };
        let l = joint_loss(logits.view(), &[0, 1], &p, &[q], &cfg).unwrap();
        assert_eq!(l.total, l.ce);
        assert!(l.lm > 0.0);
    }

    #[test]
    fn tape_value_matches_pure_loss() {
        let x = array![[0.1, 1.0], [0.3, -1.0], [0.2, 0.5]];
        let prior = vec![stats(&[0.2, 0.1], &[0.5, 2.0]), stats(&[3.0, 3.0], &[1.0, 1.0])];
        let tape = Tape::new();
        let v = tape.leaf(x.clone().into_dyn(), true);
        let l = margin_loss_on_tape(&tape, v, &prior, 1.0).unwrap();
        let p = fit_gaussian(x.view()).unwrap();
        assert!((tape.scalar_value(l) - margin_loss(&p, &prior, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn prior_source_parses() {
        assert_eq!("stored".parse::<PriorSource>().unwrap(), PriorSource::Stored);
        assert!("later".parse::<PriorSource>().is_err());
    }
}
