//! Closed-form parameter and FLOP accounting.
//!
//! Conventions:
//! * FLOPs are `2 × MAC`.
//! * Base counts include every learned global tensor (conv/FC weights and
//!   biases, norm scale and shift) plus one task head of `head_classes`
//!   outputs. Running statistics are buffers and are not counted.
//! * EFT counts are bias-free: `9·a·K` (spatial) + `b·K` (pointwise) per conv
//!   site, `d` per calibrated FC layer, plus the task's own head.

use serde::{Deserialize, Serialize};

use crate::backbones::{ArchSpec, Layer, Shape, SiteInfo, SiteKind};
use crate::eft::{CompositionMode, EftConvSpec, SPATIAL_KERNEL};
use crate::error::{EftError, Result};

/// Human-readable statement of the insertion policy every number assumes.
pub const INSERTION_POLICY: &str = "EFT after every adapted convolution (including 1x1 shortcut projections), \
diagonal calibration on every calibrated FC layer, one private head per task; EFT tensors carry no biases; \
base counts include all conv/FC weights and biases, norm scale/shift and one head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCost {
    pub path: String,
    pub kind: SiteKind,
    pub width: usize,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub spec: String,
    pub mode: CompositionMode,
    pub policy: String,
    pub classes_per_task: usize,
    pub base_params: u64,
    pub eft_params_per_task: u64,
    pub growth_percent: f64,
    pub base_flops: u64,
    pub eft_flops: u64,
    pub flops_growth_percent: f64,
    pub tasks: usize,
    /// `base_params + tasks · eft_params_per_task`.
    pub total_params: u64,
    pub sites: Vec<SiteCost>,
}

fn site_params(site: &SiteInfo, spec: &EftConvSpec) -> Result<u64> {
    match site.kind {
        SiteKind::Conv => {
            spec.check_site(site.width)?;
            let k = site.width as u64;
            let kk = (SPATIAL_KERNEL * SPATIAL_KERNEL) as u64;
            Ok(kk * spec.a as u64 * k + spec.b as u64 * k)
        }
        SiteKind::Fc => Ok(site.width as u64),
    }
}

fn site_macs(site: &SiteInfo, spec: &EftConvSpec) -> u64 {
    let pixels = (site.out_hw.0 * site.out_hw.1) as u64;
    match site.kind {
        // Every EFT weight is applied once per output pixel.
        SiteKind::Conv => {
            let k = site.width as u64;
            let kk = (SPATIAL_KERNEL * SPATIAL_KERNEL) as u64;
            pixels * (kk * spec.a as u64 * k + spec.b as u64 * k)
        }
        SiteKind::Fc => site.width as u64,
    }
}

fn head_classes(arch: &ArchSpec, classes_per_task: Option<usize>) -> usize {
    classes_per_task.or(arch.head_classes).unwrap_or(0)
}

fn head_params(arch: &ArchSpec, classes: usize) -> u64 {
    if classes == 0 {
        0
    } else {
        (classes * arch.feature_dim() + classes) as u64
    }
}

/// Parameters added per task: EFT sites plus the task head.
pub fn count_eft_params(arch: &ArchSpec, spec: &EftConvSpec, classes_per_task: usize) -> Result<u64> {
    spec.validate()?;
    let mut total = 0;
    for site in arch.sites() {
        total += site_params(&site, spec)?;
    }
    Ok(total + head_params(arch, classes_per_task))
}

/// Learned global parameters plus one head of `arch.head_classes` outputs.
pub fn count_base_params(arch: &ArchSpec) -> Result<u64> {
    let mut total = 0u64;
    arch.walk(&mut |v| {
        total += match v.layer {
            Layer::Conv(c) => {
                let w = c.out_channels * c.in_channels * c.kernel * c.kernel;
                (w + if c.bias { c.out_channels } else { 0 }) as u64
            }
            Layer::Norm { channels } => 2 * *channels as u64,
            Layer::Fc(f) => (f.out_dim * f.in_dim + f.out_dim) as u64,
            _ => 0,
        }
    })?;
    Ok(total + head_params(arch, head_classes(arch, None)))
}

/// `(base, eft)` FLOPs of one forward pass of a single sample.
pub fn count_flops(arch: &ArchSpec, spec: &EftConvSpec) -> Result<(u64, u64)> {
    spec.validate()?;
    let mut base_macs = 0u64;
    arch.walk(&mut |v| {
        base_macs += match (v.layer, v.output) {
            (Layer::Conv(c), Shape::Map([_, oh, ow])) => {
                (oh * ow * c.out_channels * c.kernel * c.kernel * c.in_channels) as u64
            }
            (Layer::Fc(f), _) => (f.in_dim * f.out_dim) as u64,
            _ => 0,
        }
    })?;
    base_macs += (head_classes(arch, None) * arch.feature_dim()) as u64;
    let mut eft_macs = 0u64;
    for site in arch.sites() {
        site_params(&site, spec)?;
        eft_macs += site_macs(&site, spec);
    }
    Ok((2 * base_macs, 2 * eft_macs))
}

/// Full per-task cost report; `tasks` only affects `total_params`.
pub fn growth_report(arch: &ArchSpec, spec: &EftConvSpec, tasks: usize) -> Result<CostReport> {
    let classes = head_classes(arch, None);
    let base_params = count_base_params(arch)?;
    let eft_params_per_task = count_eft_params(arch, spec, classes)?;
    let (base_flops, eft_flops) = count_flops(arch, spec)?;
    if base_params == 0 || base_flops == 0 {
        return Err(EftError::InvalidSpec(format!("architecture {} has no parameters", arch.name)));
    }
    let mut sites = Vec::new();
    for site in arch.sites() {
        sites.push(SiteCost {
            params: site_params(&site, spec)?,
            macs: site_macs(&site, spec),
            path: site.path,
            kind: site.kind,
            width: site.width,
        });
    }
    Ok(CostReport {
        arch: arch.name.clone(),
        spec: spec.label(),
        mode: spec.mode,
        policy: INSERTION_POLICY.to_string(),
        classes_per_task: classes,
        base_params,
        eft_params_per_task,
        growth_percent: 100.0 * eft_params_per_task as f64 / base_params as f64,
        base_flops,
        eft_flops,
        flops_growth_percent: 100.0 * eft_flops as f64 / base_flops as f64,
        tasks,
        total_params: base_params + tasks as u64 * eft_params_per_task,
        sites,
    })
}

impl CostReport {
    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = format!("{} {} ({:?})\n", self.arch, self.spec, self.mode);
        s += &format!("policy: {}\n", self.policy);
        s += &format!("{:<24} {:>8} {:>12} {:>14}\n", "site", "width", "params", "flops");
        for site in &self.sites {
            s += &format!("{:<24} {:>8} {:>12} {:>14}\n", site.path, site.width, site.params, 2 * site.macs);
        }
        s += &format!("{:<24} {:>8} {:>12}\n", "head", self.classes_per_task, self.eft_params_per_task - self.sites.iter().map(|c| c.params).sum::<u64>());
        s += &format!(
            "base params {}  per-task {}  growth {:.2}%\n",
            self.base_params, self.eft_params_per_task, self.growth_percent
        );
        s += &format!(
            "base flops {}  eft flops {}  growth {:.2}%\n",
            self.base_flops, self.eft_flops, self.flops_growth_percent
        );
        s += &format!("total params after {} task(s): {}\n", self.tasks, self.total_params);
        s
    }
}
