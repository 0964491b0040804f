//! Continual generative modelling at toy scale.
//!
//! A generator and a discriminator each live in their own [`Registry`], so
//! the freeze/finalize rules of the classifier carry over unchanged: both
//! global networks train on task 1 only, and every task owns a private EFT
//! set in both nets. A probe-noise bank drawn once at the start of the run
//! records `G(Z*; θ, τ_t)` at the end of each task; replaying it later must
//! give bit-identical images.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{concatenate, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveTensor, Record};
use crate::autodiff::{Tape, Var};
use crate::backbones::{
    build_arch, classifier_on_tape, run_layers, BoundGlobal, BoundTask, NormMode, NormStats, GAN_NOISE_DIM,
    NORM_MOMENTUM,
};
use crate::data::{batch_order, gather, noise_batch};
use crate::eft::{EftConvSpec, FeatureMap};
use crate::error::{EftError, Result};
use crate::registry::{InitPolicy, Registry};
use crate::trainer::{apply_updates, Sgd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub probe_size: usize,
    pub seed: u64,
    /// Initialization of τ_t for t ≥ 2 (τ_1 is always random).
    pub init_policy: InitPolicy,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 0.005,
            momentum: 0.5,
            weight_decay: 0.0,
            probe_size: 16,
            seed: 0,
            init_policy: InitPolicy::ForwardTransfer,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.probe_size == 0 {
            return Err(EftError::Config("gan: epochs, batch_size ≥ 2 and probe_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(EftError::Config("gan: invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Generator and discriminator registries plus the probe-noise bank.
#[derive(Debug, Clone)]
pub struct GanPair {
    pub generator: Registry,
    pub discriminator: Registry,
    /// `Z*`, `[probe, noise_dim, 1, 1]`.
    pub probe_noise: FeatureMap,
    /// `G(Z*; θ, τ_t)` recorded when task `t` was finalized.
    pub samples: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTaskSummary {
    pub task_id: usize,
    pub steps: usize,
    /// Mean discriminator and generator losses over the last epoch.
    pub d_loss: f64,
    pub g_loss: f64,
    pub generator_digest: String,
    pub discriminator_digest: String,
    pub updated: BTreeSet<String>,
}

impl GanPair {
    pub fn new(spec: EftConvSpec, seed: u64, probe_size: usize) -> Result<Self> {
        Ok(Self {
            generator: Registry::new(build_arch("gan-generator")?, spec, seed)?,
            discriminator: Registry::new(build_arch("gan-discriminator")?, spec, seed ^ 0xD15C)?,
            probe_noise: noise_batch(probe_size, GAN_NOISE_DIM, seed, 0),
            samples: Vec::new(),
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.generator.num_tasks()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.discriminator.arch.input_shape
    }

    /// Registers a task in both networks.
    pub fn add_task(&mut self, policy: InitPolicy) -> Result<usize> {
        let policy = if self.num_tasks() == 0 { InitPolicy::Random } else { policy };
        self.generator.add_task(vec![0], policy)?;
        self.discriminator.add_task(vec![0], policy)?;
        Ok(self.num_tasks())
    }

    fn finalize(&mut self, t: usize) -> Result<(String, String)> {
        let g = self.generator.finalize_task(t)?;
        let d = self.discriminator.finalize_task(t)?;
        self.samples.push(sample(self, t, &self.probe_noise)?);
        Ok((g, d))
    }

    /// Replays the probe bank under every finalized task and compares
    /// against the recordings bit for bit.
    pub fn probes_replay_exactly(&self) -> Result<bool> {
        for (i, recorded) in self.samples.iter().enumerate() {
            let again = sample(self, i + 1, &self.probe_noise)?;
            if again.iter().zip(recorded.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.generator.save(&dir.join("generator"))?;
        self.discriminator.save(&dir.join("discriminator"))?;
        let mut recs: Vec<Record> = vec![("probe_noise".into(), ArchiveTensor::F64(self.probe_noise.clone().into_dyn()))];
        for (i, s) in self.samples.iter().enumerate() {
            recs.push((format!("samples{}", i + 1), ArchiveTensor::F64(s.clone().into_dyn())));
        }
        archive::write_file(&dir.join("probes.tsr"), &recs)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let generator = Registry::load(&dir.join("generator"))?;
        let discriminator = Registry::load(&dir.join("discriminator"))?;
        let (recs, _) = archive::read_file(&dir.join("probes.tsr"))?;
        let bad = |e: ndarray::ShapeError| EftError::CorruptArchive(e.to_string());
        let mut probe_noise = None;
        let mut samples = Vec::new();
        for (name, t) in recs {
            let t: Array4<f64> = t.into_f64()?.into_dimensionality().map_err(bad)?;
            if name == "probe_noise" {
                probe_noise = Some(t);
            } else {
                samples.push(t);
            }
        }
        Ok(Self {
            generator,
            discriminator,
            probe_noise: probe_noise.ok_or_else(|| EftError::CorruptArchive("probe noise missing".into()))?,
            samples,
        })
    }
}

/// `G(noise; θ, τ_t)` with frozen normalization statistics.
pub fn sample(pair: &GanPair, t: usize, noise: &FeatureMap) -> Result<FeatureMap> {
    let g = &pair.generator;
    let tape = Tape::new();
    let bg = BoundGlobal::bind(&tape, g.global(), false);
    let bt = BoundTask::bind(&tape, g.task(t)?, false);
    let z = tape.constant(noise.clone().into_dyn());
    let out = run_layers(&tape, &g.arch, &bg, Some(&bt), &g.spec, z, NormMode::Running)?;
    let v = tape.value(out.out);
    v.as_ref()
        .clone()
        .into_dimensionality()
        .map_err(|e| EftError::dims(e.to_string()))
}

fn norm_mode(r: &Registry) -> NormMode {
    if r.global().is_frozen() {
        NormMode::Running
    } else {
        NormMode::Batch
    }
}

fn bound_vars(bg: &BoundGlobal<'_>, trainable: bool) -> Vec<(String, Var)> {
    if trainable {
        bg.vars().map(|(n, v)| (n.clone(), *v)).collect()
    } else {
        Vec::new()
    }
}

fn update_stats(r: &mut Registry, stats: &[NormStats]) -> Result<()> {
    if r.global().is_frozen() {
        return Ok(());
    }
    let global = r.global_mut()?;
    for s in stats {
        global.update_running_stats(s, NORM_MOMENTUM)?;
    }
    Ok(())
}

/// Trains the current task on `images` (`[N, C, H, W]` in `[-1, 1]`) with
/// alternating discriminator/generator steps and the non-saturating loss,
/// then finalizes it in both networks.
pub fn train_gan_task(pair: &mut GanPair, images: &FeatureMap, cfg: &GanConfig) -> Result<GanTaskSummary> {
    cfg.validate()?;
    let t = pair
        .generator
        .current_task()
        .ok_or_else(|| EftError::Config("no GAN task awaiting training; call add_task first".into()))?;
    let shape = pair.image_shape();
    if images.shape()[1..] != shape {
        return Err(EftError::dims(format!("images {:?}, discriminator expects {shape:?}", images.shape())));
    }
    let n = images.shape()[0];
    if n < 2 {
        return Err(EftError::TooFewSamples { needed: 2, got: n });
    }
    let train_theta = !pair.generator.global().is_frozen();
    let mut g_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut d_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let (mut g_updated, mut d_updated) = (BTreeSet::new(), BTreeSet::new());
    let (mut step, mut d_last, mut g_last) = (0, 0.0, 0.0);
    let data_seed = cfg.seed ^ (t as u64).wrapping_mul(0xA24B_AED4);

    for epoch in 0..cfg.epochs {
        let (mut d_sum, mut g_sum, mut batches) = (0.0, 0.0, 0);
        for idx in batch_order(n, cfg.batch_size, data_seed, epoch) {
            let real = gather(images, &idx);
            let b = real.shape()[0];
            let z = noise_batch(b, GAN_NOISE_DIM, cfg.seed, ((t as u64) << 32) | step as u64);

            // Discriminator step on real ∪ fake, generator held fixed.
            let fake = {
                let tape = Tape::new();
                let bg = BoundGlobal::bind(&tape, pair.generator.global(), false);
                let bt = BoundTask::bind(&tape, pair.generator.task(t)?, false);
                let zv = tape.constant(z.clone().into_dyn());
                let out = run_layers(
                    &tape,
                    &pair.generator.arch,
                    &bg,
                    Some(&bt),
                    &pair.generator.spec,
                    zv,
                    norm_mode(&pair.generator),
                )?;
                let v = tape.value(out.out);
                v.as_ref().clone()
            };
            let (d_loss, grads, gvars, tvars, stats) = {
                let d = &pair.discriminator;
                let tape = Tape::new();
                let bg = BoundGlobal::bind(&tape, d.global(), train_theta);
                let bt = BoundTask::bind(&tape, d.task(t)?, true);
                let head = bt.head.ok_or_else(|| EftError::dims("discriminator task has no head"))?;
                let fake4 = fake.clone().into_dimensionality().map_err(|e| EftError::dims(e.to_string()))?;
                let both = concatenate(Axis(0), &[real.view(), fake4.view()]).map_err(|e| EftError::dims(e.to_string()))?;
                let xv = tape.constant(both.into_dyn());
                let out = classifier_on_tape(&tape, &d.arch, &bg, Some(&bt), head, &d.spec, xv, norm_mode(d))?;
                let loss = split_bce(&tape, out.logits, b)?;
                let grads = tape.backward(loss);
                (
                    tape.scalar_value(loss),
                    grads,
                    bound_vars(&bg, train_theta),
                    bt.named_vars(),
                    out.norm_stats,
                )
            };
            if !d_loss.is_finite() {
                return Err(EftError::Diverged { task: t, step, loss: d_loss });
            }
            apply_updates(&mut pair.discriminator, t, &grads, &gvars, &tvars, &mut d_opt, cfg.lr, &mut d_updated)?;
            update_stats(&mut pair.discriminator, &stats)?;

            // Generator step through a fixed discriminator.
            let (g_loss, grads, gvars, tvars, stats) = {
                let (g, d) = (&pair.generator, &pair.discriminator);
                let tape = Tape::new();
                let bg = BoundGlobal::bind(&tape, g.global(), train_theta);
                let bt = BoundTask::bind(&tape, g.task(t)?, true);
                let zv = tape.constant(z.into_dyn());
                let out = run_layers(&tape, &g.arch, &bg, Some(&bt), &g.spec, zv, norm_mode(g))?;
                let dg = BoundGlobal::bind(&tape, d.global(), false);
                let dt = BoundTask::bind(&tape, d.task(t)?, false);
                let head = dt.head.ok_or_else(|| EftError::dims("discriminator task has no head"))?;
                // Discriminator statistics are not updated here.
                let dout = classifier_on_tape(&tape, &d.arch, &dg, Some(&dt), head, &d.spec, out.out, norm_mode(d))?;
                let loss = tape.bce_with_logits(dout.logits, 1.0);
                let grads = tape.backward(loss);
                (
                    tape.scalar_value(loss),
                    grads,
                    bound_vars(&bg, train_theta),
                    bt.named_vars(),
                    out.norm_stats,
                )
            };
            if !g_loss.is_finite() {
                return Err(EftError::Diverged { task: t, step, loss: g_loss });
            }
            apply_updates(&mut pair.generator, t, &grads, &gvars, &tvars, &mut g_opt, cfg.lr, &mut g_updated)?;
            update_stats(&mut pair.generator, &stats)?;

            d_sum += d_loss;
            g_sum += g_loss;
            batches += 1;
            step += 1;
        }
        d_last = d_sum / batches as f64;
        g_last = g_sum / batches as f64;
    }

    let (generator_digest, discriminator_digest) = pair.finalize(t)?;
    let updated = g_updated
        .into_iter()
        .map(|n| format!("generator.{n}"))
        .chain(d_updated.into_iter().map(|n| format!("discriminator.{n}")))
        .collect();
    Ok(GanTaskSummary {
        task_id: t,
        steps: step,
        d_loss: d_last,
        g_loss: g_last,
        generator_digest,
        discriminator_digest,
        updated,
    })
}

/// `bce(real, 1) + bce(fake, 0)` where the first `b` rows are real.
fn split_bce(tape: &Tape, logits: Var, b: usize) -> Result<Var> {
    let lv = tape.value(logits);
    let n = lv.shape()[0];
    let mut targets = ndarray::ArrayD::<f64>::zeros(lv.raw_dim());
    targets.slice_axis_mut(Axis(0), (0..b).into()).fill(1.0);
    let fake = (n - b).max(1) as f64;
    let real = b.max(1) as f64;
    let value: f64 = lv
        .iter()
        .zip(targets.iter())
        .enumerate()
        .map(|(i, (&z, &y))| {
            let w = if i < b { 1.0 / real } else { 1.0 / fake };
            w * (z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
        })
        .sum();
    Ok(tape.record(ndarray::arr0(value).into_dyn(), &[logits], move |g, _| {
        let s = g.iter().next().copied().unwrap_or(1.0);
        let mut out = lv.as_ref().clone();
        for (i, (o, &y)) in out.iter_mut().zip(targets.iter()).enumerate() {
            let w = if i < b { 1.0 / real } else { 1.0 / fake };
            *o = s * w * (1.0 / (1.0 + (-*o).exp()) - y);
        }
        vec![Some(out)]
    }))
}

/// Writes images `[N, C, H, W]` (values in `[-1, 1]`, C ∈ {1, 3}) as a PNG
/// grid with `cols` columns, each pixel repeated `scale` times.
pub fn write_grid(path: &Path, images: &FeatureMap, cols: usize, scale: usize) -> Result<()> {
    let (n, c, h, w) = images.dim();
    if !(c == 1 || c == 3) || n == 0 || cols == 0 || scale == 0 {
        return Err(EftError::Render(format!("cannot render {n} images with {c} channels")));
    }
    let rows = n.div_ceil(cols);
    let pad = 1;
    let (cw, ch) = (w * scale + pad, h * scale + pad);
    let mut img = image::RgbImage::new((cols * cw + pad) as u32, (rows * ch + pad) as u32);
    let to_u8 = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    for i in 0..n {
        let (gx, gy) = ((i % cols) * cw + pad, (i / cols) * ch + pad);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let px = |ch: usize| to_u8(images[[i, ch.min(c - 1), y / scale, x / scale]]);
                img.put_pixel((gx + x) as u32, (gy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    img.save(path).map_err(|e| EftError::Render(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::two_mode_images;

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let mut pair = GanPair::new(EftConvSpec::serial(4, 8).unwrap(), 3, 4).unwrap();
        pair.add_task(InitPolicy::Random).unwrap();
        let z = noise_batch(5, GAN_NOISE_DIM, 1, 1);
        let a = sample(&pair, 1, &z).unwrap();
        assert_eq!(a.dim(), (5, 1, 8, 8));
        assert_eq!(a, sample(&pair, 1, &z).unwrap());
        assert!(matches!(sample(&pair, 2, &z), Err(EftError::UnknownTask(2))));
    }

    #[test]
    fn one_short_task_trains_and_freezes() {
        let mut pair = GanPair::new(EftConvSpec::serial(4, 8).unwrap(), 3, 4).unwrap();
        pair.add_task(InitPolicy::Random).unwrap();
        let data = two_mode_images(16, [1, 8, 8], 0.05, 0, 1);
        let cfg = GanConfig { epochs: 1, batch_size: 8, ..GanConfig::default() };
        let s = train_gan_task(&mut pair, &data, &cfg).unwrap();
        assert_eq!(s.steps, 2);
        assert!(pair.generator.global().is_frozen() && pair.discriminator.global().is_frozen());
        assert!(s.updated.iter().any(|n| n.starts_with("generator.global.")));
        assert!(s.updated.iter().any(|n| n.starts_with("discriminator.task1.")));
        assert_eq!(pair.samples.len(), 1);
    }
}
