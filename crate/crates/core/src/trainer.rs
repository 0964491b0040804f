//! Sequential training over a task sequence.
//!
//! Each task trains only its own parameters τ_t (plus θ during the first
//! task) with SGD + momentum on cross-entropy plus the weighted margin loss,
//! then finalizes τ_t, records probe logits and evaluates every task seen so
//! far with the task given (TIL) and inferred (CIL).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveTensor, Record};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::backbones::{
    bind_head, classifier_on_tape, forward, forward_with_features, ArchSpec, BoundGlobal, BoundTask,
    NormMode, NORM_MOMENTUM,
};
use crate::data::{augment, batch_order, gather, Materialized, TaskData};
use crate::eft::{EftConvSpec, FeatureMap};
use crate::error::{EftError, Result};
use crate::inference::{argmax, TaskLogits};
use crate::margin::{fit_gaussian, margin_loss_on_tape, GaussianStats, MarginConfig, PriorSource};
use crate::registry::{stream_rng, GlobalParams, InitPolicy, Registry, TaskHead};

/// Optimisation hyper-parameters. [`TrainConfig::default`] is the CIFAR
/// ResNet-18 recipe; [`TrainConfig::desk`] is the small workstation profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_first: usize,
    pub epochs_rest: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate decay epochs for the first task.
    pub milestones: Vec<usize>,
    /// Decay epochs for later tasks; `None` reuses `milestones`.
    pub milestones_rest: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Initialisation of τ_t for t ≥ 2.
    pub init_policy: InitPolicy,
    /// Initialisation of τ_1.
    pub first_init: InitPolicy,
    pub margin: MarginConfig,
    /// Random flips and 4-pixel crops (image datasets only).
    pub augment: bool,
    /// Samples per task used for the end-of-task probe recording.
    pub probe_size: usize,
    /// Epoch-mean cross-entropy below which a task counts as converged
    /// (only reported).
    pub loss_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_first: 250,
            epochs_rest: 200,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.005,
            milestones: vec![100, 150, 200],
            milestones_rest: Some(vec![70, 120, 150]),
            lr_decay: 0.1,
            batch_size: 128,
            seed: 0,
            init_policy: InitPolicy::ForwardTransfer,
            first_init: InitPolicy::Random,
            margin: MarginConfig::default(),
            augment: false,
            probe_size: 16,
            loss_threshold: None,
        }
    }
}

impl TrainConfig {
    /// Short schedules with milestones at the same relative positions as the
    /// full recipe.
    pub fn desk() -> Self {
        Self {
            epochs_first: 30,
            epochs_rest: 20,
            milestones: vec![12, 18, 24],
            milestones_rest: Some(vec![7, 12, 15]),
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if self.batch_size < 2 {
            return Err(EftError::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EftError::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return Err(EftError::Config("momentum in [0, 1), weight_decay >= 0, lr_decay > 0".into()));
        }
        if self.first_init == InitPolicy::ForwardTransfer {
            return Err(EftError::Config("the first task cannot use forward transfer".into()));
        }
        Ok(())
    }

    pub fn epochs(&self, task_id: usize) -> usize {
        if task_id == 1 {
            self.epochs_first
        } else {
            self.epochs_rest
        }
    }

    /// Step-decayed learning rate for `epoch` (0-based) of `task_id`.
    pub fn lr_at(&self, task_id: usize, epoch: usize) -> f64 {
        let milestones = match (&self.milestones_rest, task_id) {
            (Some(m), t) if t > 1 => m,
            _ => &self.milestones,
        };
        let passed = milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Same schedule with every epoch count and milestone scaled by `f`.
    pub fn scaled_epochs(&self, f: f64) -> Self {
        let sc = |e: usize| ((e as f64 * f).round() as usize).max(1);
        Self {
            epochs_first: sc(self.epochs_first),
            epochs_rest: sc(self.epochs_rest),
            milestones: self.milestones.iter().map(|&m| sc(m)).collect(),
            milestones_rest: self.milestones_rest.as_ref().map(|v| v.iter().map(|&m| sc(m)).collect()),
            ..self.clone()
        }
    }
}

/// SGD with momentum and L2 weight decay; `v ← μv + g + λp`, `p ← p − ηv`.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, mut param: ndarray::ArrayViewMutD<'_, f64>, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(EftError::dims(format!("gradient {:?} for `{name}` {:?}", grad.shape(), param.shape())));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(grad.raw_dim()));
        let (mu, wd) = (self.momentum, self.weight_decay);
        ndarray::Zip::from(&mut *v)
            .and(&param)
            .and(grad)
            .for_each(|v, &p, &g| *v = mu * *v + g + wd * p);
        ndarray::Zip::from(&mut param).and(&*v).for_each(|p, &v| *p -= lr * v);
        Ok(())
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub lm: f64,
    pub total: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub steps: usize,
    /// Mean cross-entropy of every epoch.
    pub epoch_ce: Vec<f64>,
    /// Training accuracy over the last epoch.
    pub final_train_acc: f64,
    /// Optimizer steps until the epoch-mean cross-entropy first fell to the
    /// configured threshold.
    pub steps_to_threshold: Option<usize>,
    /// Names of tensors that received updates.
    pub updated: BTreeSet<String>,
    pub digest: String,
}

/// End-of-task logits of a fixed probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub task_id: usize,
    pub x: FeatureMap,
    pub logits: Array2<f64>,
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let l = logits.view().into_dimensionality::<Ix2>().expect("rank 2");
    let hits = l
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Penultimate-feature Gaussians of `x` under each earlier task.
fn prior_stats(registry: &Registry, x: &FeatureMap, current: usize, source: PriorSource) -> Result<Vec<GaussianStats>> {
    let mut out = Vec::new();
    for task in registry.finalized_tasks().filter(|t| t.task_id < current) {
        match source {
            PriorSource::Reencode => {
                let (_, f) = forward_with_features(x, &registry.arch, registry.global(), task, &registry.spec)?;
                out.push(fit_gaussian(f.view())?);
            }
            PriorSource::Stored => {
                let s = registry.stored_stats().get(&task.task_id).ok_or_else(|| {
                    EftError::Config(format!("no stored feature statistics for task {}", task.task_id))
                })?;
                out.push(s.clone());
            }
        }
    }
    Ok(out)
}

/// Trains the current task `t` and finalizes it.
pub fn train_task(
    registry: &mut Registry,
    data: &TaskData,
    cfg: &TrainConfig,
    metrics: &mut Vec<MetricRow>,
) -> Result<TaskSummary> {
    let t = registry
        .current_task()
        .ok_or_else(|| EftError::Config("no task awaiting training; call add_task first".into()))?;
    if data.classes != registry.task(t)?.classes {
        return Err(EftError::dims(format!("data classes {:?} differ from task {t}", data.classes)));
    }
    let n = data.train_y.len();
    if n < 2 {
        return Err(EftError::TooFewSamples { needed: 2, got: n });
    }
    let theta_trainable = !registry.global().is_frozen();
    let mode = if theta_trainable { NormMode::Batch } else { NormMode::Running };
    let margin = cfg.margin;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut aug_rng = stream_rng(cfg.seed, &[0x617567, t as u64]);
    let mut step = 0;
    let mut epoch_ce = Vec::new();
    let mut final_train_acc = 0.0;
    let mut steps_to_threshold = None;
    let mut updated = BTreeSet::new();
    let data_seed = cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9);

    for epoch in 0..cfg.epochs(t) {
        let lr = cfg.lr_at(t, epoch);
        let (mut ce_sum, mut acc_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in batch_order(n, cfg.batch_size, data_seed, epoch) {
            let mut x = gather(&data.train_x, &idx);
            if cfg.augment {
                augment(&mut x, true, 4, &mut aug_rng);
            }
            let y: Vec<usize> = idx.iter().map(|&i| data.train_y[i]).collect();
            let priors = if margin.lambda > 0.0 && t > 1 {
                prior_stats(registry, &x, t, margin.prior_source)?
            } else {
                Vec::new()
            };

            let tape = Tape::new();
            let (loss, ce, lm, logits, gvars, tvars, norm_stats) = {
                let bg = BoundGlobal::bind(&tape, registry.global(), theta_trainable);
                let bt = BoundTask::bind(&tape, registry.task(t)?, true);
                let head = bt.head.ok_or_else(|| EftError::dims("task has no head"))?;
                let xv = tape.constant(x.into_dyn());
                let out = classifier_on_tape(&tape, &registry.arch, &bg, Some(&bt), head, &registry.spec, xv, mode)?;
                let ce = tape.cross_entropy(out.logits, &y)?;
                let (loss, lm) = if priors.is_empty() {
                    (ce, None)
                } else {
                    let lm = margin_loss_on_tape(&tape, out.features, &priors, margin.delta)?;
                    (tape.add(ce, tape.scale(lm, margin.lambda))?, Some(lm))
                };
                let gvars: Vec<(String, Var)> = if theta_trainable {
                    bg.vars().map(|(n, v)| (n.clone(), *v)).collect()
                } else {
                    Vec::new()
                };
                (loss, ce, lm, out.logits, gvars, bt.named_vars(), out.norm_stats)
            };
            let total = tape.scalar_value(loss);
            let ce_v = tape.scalar_value(ce);
            let lm_v = lm.map_or(0.0, |v| tape.scalar_value(v));
            if !total.is_finite() {
                return Err(EftError::Diverged { task: t, step, loss: total });
            }
            let acc = batch_accuracy(&tape.value(logits), &y);
            let grads = tape.backward(loss);
            apply_updates(registry, t, &grads, &gvars, &tvars, &mut sgd, lr, &mut updated)?;
            if theta_trainable {
                let global = registry.global_mut()?;
                for stats in &norm_stats {
                    global.update_running_stats(stats, NORM_MOMENTUM)?;
                }
            }
            metrics.push(MetricRow {
                task: t,
                epoch,
                step,
                ce: ce_v,
                lm: lm_v,
                total,
                train_acc: acc,
            });
            step += 1;
            ce_sum += ce_v * y.len() as f64;
            acc_sum += acc * y.len() as f64;
            seen += y.len();
        }
        let mean_ce = ce_sum / seen as f64;
        epoch_ce.push(mean_ce);
        final_train_acc = acc_sum / seen as f64;
        if steps_to_threshold.is_none() && cfg.loss_threshold.is_some_and(|th| mean_ce <= th) {
            steps_to_threshold = Some(step);
        }
    }

    let digest = registry.finalize_task(t)?;
    let (_, features) = forward_with_features(&data.train_x, &registry.arch, registry.global(), registry.task(t)?, &registry.spec)?;
    registry.set_stored_stats(t, fit_gaussian(features.view())?)?;
    Ok(TaskSummary {
        task_id: t,
        steps: step,
        epoch_ce,
        final_train_acc,
        steps_to_threshold,
        updated,
        digest,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_updates(
    registry: &mut Registry,
    t: usize,
    grads: &Gradients,
    gvars: &[(String, Var)],
    tvars: &[(String, Var)],
    sgd: &mut Sgd,
    lr: f64,
    updated: &mut BTreeSet<String>,
) -> Result<()> {
    {
        let task = registry.task_mut(t)?;
        let views = task.tensors_mut()?;
        for ((name, view), (vname, var)) in views.into_iter().zip(tvars) {
            debug_assert_eq!(&name, vname);
            if let Some(g) = grads.get(*var) {
                sgd.step(&format!("task{t}.{name}"), view, g, lr)?;
                updated.insert(format!("task{t}.{name}"));
            }
        }
    }
    if !gvars.is_empty() {
        let global = registry.global_mut()?;
        for (name, var) in gvars {
            if let Some(g) = grads.get(*var) {
                let p = global.get_mut(name)?;
                sgd.step(&format!("global.{name}"), p.view_mut(), g, lr)?;
                updated.insert(format!("global.{name}"));
            }
        }
    }
    Ok(())
}

/// `R[i][t]`: accuracy on task `i` after training task `t` (1-based, `i ≤ t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; num_tasks]; num_tasks],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, i: usize, t: usize, acc: f64) {
        assert!(i >= 1 && i <= t && t <= self.num_tasks(), "cell ({i}, {t}) outside the lower triangle");
        self.cells[i - 1][t - 1] = Some(acc);
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.cells.get(i.wrapping_sub(1))?.get(t.wrapping_sub(1)).copied().flatten()
    }

    /// Mean of `R[i][t]` over `i ≤ t`.
    pub fn average_after(&self, t: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = (1..=t).map(|i| self.get(i, t)).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn averages(&self) -> Vec<f64> {
        (1..=self.num_tasks()).filter_map(|t| self.average_after(t)).collect()
    }

    pub fn final_average(&self) -> Option<f64> {
        self.average_after(self.num_tasks())
    }

    /// Whether `R[i][t] = R[i][i]` bit-for-bit for every filled `t ≥ i`.
    pub fn rows_constant(&self) -> bool {
        (1..=self.num_tasks()).all(|i| {
            let d = self.get(i, i);
            (i..=self.num_tasks()).all(|t| self.get(i, t).is_none_or(|v| Some(v) == d))
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["task".to_string()];
        header.extend((1..=self.num_tasks()).map(|t| format!("after_{t}")));
        w.write_record(&header)?;
        for (i, row) in self.cells.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|c| c.map_or(String::new(), |v| format!("{v:?}"))));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| EftError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse::<f64>()
                            .map(Some)
                            .map_err(|e| EftError::Config(format!("bad matrix cell `{s}`: {e}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(row);
        }
        Ok(Self { cells })
    }
}

/// Accuracies of the tasks seen so far, after task `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub til: Vec<f64>,
    pub cil: Vec<f64>,
    /// Fraction of each task's test samples whose task was identified.
    pub task_pred: Vec<f64>,
    pub forward_passes: usize,
}

/// Evaluates tasks `1..=t` of `data` on the registry's finalized tasks.
pub fn evaluate(registry: &Registry, data: &[TaskData], t: usize) -> Result<Evaluation> {
    let mut ev = Evaluation {
        til: Vec::new(),
        cil: Vec::new(),
        task_pred: Vec::new(),
        forward_passes: 0,
    };
    for task in data.iter().take(t) {
        let truth = task.global_test_labels();
        let n = truth.len().max(1) as f64;
        let tl = TaskLogits::compute(&task.test_x, registry)?;
        ev.forward_passes += tl.forward_passes;
        let frac = |pred: &[usize], want: &dyn Fn(usize) -> usize| {
            pred.iter().enumerate().filter(|(k, &p)| p == want(*k)).count() as f64 / n
        };
        let til = frac(&tl.til(task.task_id)?, &|k| truth[k]);
        let cil = frac(&tl.cil(), &|k| truth[k]);
        let tp = frac(&tl.predict_tasks(), &|_| task.task_id);
        if cil > til {
            return Err(EftError::Assertion(format!(
                "task {}: CIL accuracy {cil} exceeds TIL accuracy {til}",
                task.task_id
            )));
        }
        ev.til.push(til);
        ev.cil.push(cil);
        ev.task_pred.push(tp);
    }
    Ok(ev)
}

/// Everything produced by [`run_sequence`].
#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub til: AccuracyMatrix,
    pub cil: AccuracyMatrix,
    pub task_pred: AccuracyMatrix,
    pub registry: Registry,
    pub summaries: Vec<TaskSummary>,
    pub metrics: Vec<MetricRow>,
    pub probes: Vec<Probe>,
}

impl SequenceResult {
    /// Replays every probe under the current registry; `true` iff all
    /// logits match the end-of-task recordings bit-for-bit.
    pub fn probes_replay_exactly(&self) -> Result<bool> {
        replay_probes(&self.registry, &self.probes)
    }
}

pub fn replay_probes(registry: &Registry, probes: &[Probe]) -> Result<bool> {
    for p in probes {
        let now = forward(&p.x, &registry.arch, registry.global(), registry.task(p.task_id)?, &registry.spec)?;
        if now.iter().zip(p.logits.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) || now.dim() != p.logits.dim() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Runs the whole sequence with a fresh registry.
pub fn run_sequence(data: &Materialized, arch: &ArchSpec, spec: EftConvSpec, cfg: &TrainConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    let registry = Registry::new(arch.clone(), spec, cfg.seed)?;
    run_sequence_with(registry, data, cfg)
}

/// Runs the whole sequence starting from `registry` (which must hold no
/// tasks yet).
pub fn run_sequence_with(mut registry: Registry, data: &Materialized, cfg: &TrainConfig) -> Result<SequenceResult> {
    if registry.num_tasks() != 0 {
        return Err(EftError::Config("run_sequence needs an empty registry".into()));
    }
    let tcount = data.tasks.len();
    let mut til = AccuracyMatrix::new(tcount);
    let mut cil = AccuracyMatrix::new(tcount);
    let mut task_pred = AccuracyMatrix::new(tcount);
    let mut summaries = Vec::new();
    let mut metrics = Vec::new();
    let mut probes = Vec::new();
    for (k, task) in data.tasks.iter().enumerate() {
        let t = k + 1;
        let policy = if t == 1 { cfg.first_init } else { cfg.init_policy };
        registry.add_task(task.classes.clone(), policy)?;
        summaries.push(train_task(&mut registry, task, cfg, &mut metrics)?);
        let m = cfg.probe_size.min(task.test_y.len());
        let idx: Vec<usize> = (0..m).collect();
        let px = gather(&task.test_x, &idx);
        let logits = forward(&px, &registry.arch, registry.global(), registry.task(t)?, &registry.spec)?;
        probes.push(Probe { task_id: t, x: px, logits });
        let ev = evaluate(&registry, &data.tasks, t)?;
        for i in 1..=t {
            til.set(i, t, ev.til[i - 1]);
            cil.set(i, t, ev.cil[i - 1]);
            task_pred.set(i, t, ev.task_pred[i - 1]);
        }
    }
    registry.verify()?;
    Ok(SequenceResult {
        til,
        cil,
        task_pred,
        registry,
        summaries,
        metrics,
        probes,
    })
}

/// Recomputes the three accuracy matrices from a finished registry by
/// evaluating each prefix `1..=t` of its tasks.
pub fn recompute_matrices(registry: &Registry, data: &Materialized) -> Result<(AccuracyMatrix, AccuracyMatrix, AccuracyMatrix)> {
    let tcount = registry.num_tasks().min(data.tasks.len());
    let (mut til, mut cil, mut tp) = (
        AccuracyMatrix::new(tcount),
        AccuracyMatrix::new(tcount),
        AccuracyMatrix::new(tcount),
    );
    for t in 1..=tcount {
        let prefix = registry.truncated(t)?;
        let ev = evaluate(&prefix, &data.tasks, t)?;
        for i in 1..=t {
            til.set(i, t, ev.til[i - 1]);
            cil.set(i, t, ev.cil[i - 1]);
            tp.set(i, t, ev.task_pred[i - 1]);
        }
    }
    Ok((til, cil, tp))
}

/// Forward-transfer and random initialisation runs over the same sequence.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub transfer: SequenceResult,
    pub random: SequenceResult,
}

pub fn forward_transfer_ablation(data: &Materialized, arch: &ArchSpec, spec: EftConvSpec, cfg: &TrainConfig) -> Result<Ablation> {
    let with = |policy| TrainConfig {
        init_policy: policy,
        ..cfg.clone()
    };
    Ok(Ablation {
        transfer: run_sequence(data, arch, spec, &with(InitPolicy::ForwardTransfer))?,
        random: run_sequence(data, arch, spec, &with(InitPolicy::Random))?,
    })
}

/// Result of the shared-network baseline.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    /// Class-incremental accuracy (prediction over all classes seen so far).
    pub cil: AccuracyMatrix,
}

/// Naive fine-tuning baseline: one network and one head over all classes,
/// fully retrained on each task's data in turn, without EFTs.
pub fn run_finetune_baseline(data: &Materialized, arch: &ArchSpec, cfg: &TrainConfig) -> Result<BaselineResult> {
    cfg.validate()?;
    let total = data.sequence.total_classes;
    let spec = EftConvSpec::serial(0, 1)?;
    let mut global = GlobalParams::init(arch, cfg.seed);
    let mut head = TaskHead::random(total, arch.feature_dim(), &mut stream_rng(cfg.seed, &[0x66696e65]));
    let tcount = data.tasks.len();
    let mut cil = AccuracyMatrix::new(tcount);
    let mut seen_classes: Vec<usize> = Vec::new();
    for (k, task) in data.tasks.iter().enumerate() {
        let t = k + 1;
        seen_classes.extend(&task.classes);
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let n = task.train_y.len();
        let data_seed = cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9);
        for epoch in 0..cfg.epochs(t) {
            let lr = cfg.lr_at(t, epoch);
            for idx in batch_order(n, cfg.batch_size, data_seed, epoch) {
                let x = gather(&task.train_x, &idx);
                let y: Vec<usize> = idx.iter().map(|&i| task.classes[task.train_y[i]]).collect();
                let tape = Tape::new();
                let (loss, gvars, hvars, norm_stats) = {
                    let bg = BoundGlobal::bind(&tape, &global, true);
                    let h = bind_head(&tape, &head, true);
                    let xv = tape.constant(x.into_dyn());
                    let out = classifier_on_tape(&tape, arch, &bg, None, h, &spec, xv, NormMode::Batch)?;
                    let loss = tape.cross_entropy(out.logits, &y)?;
                    let gvars: Vec<(String, Var)> = bg.vars().map(|(n, v)| (n.clone(), *v)).collect();
                    (loss, gvars, h, out.norm_stats)
                };
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    return Err(EftError::Diverged { task: t, step: 0, loss: value });
                }
                let grads = tape.backward(loss);
                for (name, var) in &gvars {
                    if let Some(g) = grads.get(*var) {
                        sgd.step(name, global.get_mut(name)?.view_mut(), g, lr)?;
                    }
                }
                if let Some(g) = grads.get(hvars.0) {
                    sgd.step("head.weight", head.weight.view_mut().into_dyn(), g, lr)?;
                }
                if let Some(g) = grads.get(hvars.1) {
                    sgd.step("head.bias", head.bias.view_mut().into_dyn(), g, lr)?;
                }
                for stats in &norm_stats {
                    global.update_running_stats(stats, NORM_MOMENTUM)?;
                }
            }
        }
        for (j, prev) in data.tasks.iter().take(t).enumerate() {
            let tape = Tape::new();
            let bg = BoundGlobal::bind(&tape, &global, false);
            let h = bind_head(&tape, &head, false);
            let xv = tape.constant(prev.test_x.clone().into_dyn());
            let out = classifier_on_tape(&tape, arch, &bg, None, h, &spec, xv, NormMode::Running)?;
            let logits = tape.value(out.logits);
            let l = logits.view().into_dimensionality::<Ix2>().expect("rank 2");
            let truth = prev.global_test_labels();
            let hits = l
                .rows()
                .into_iter()
                .zip(&truth)
                .filter(|(row, &y)| {
                    let best = seen_classes
                        .iter()
                        .copied()
                        .fold(None::<usize>, |b, c| match b {
                            Some(b) if row[b] >= row[c] => Some(b),
                            _ => Some(c),
                        })
                        .expect("classes seen");
                    best == y
                })
                .count();
            cil.set(j + 1, t, hits as f64 / truth.len().max(1) as f64);
        }
    }
    Ok(BaselineResult { cil })
}

/// Writes `metrics.csv`.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| EftError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(EftError::from)).collect()
}

pub fn write_probes(path: &Path, probes: &[Probe]) -> Result<String> {
    let mut recs: Vec<Record> = Vec::new();
    for p in probes {
        recs.push((format!("task{}.x", p.task_id), ArchiveTensor::F64(p.x.clone().into_dyn())));
        recs.push((format!("task{}.logits", p.task_id), ArchiveTensor::F64(p.logits.clone().into_dyn())));
    }
    archive::write_file(path, &recs)
}

pub fn read_probes(path: &Path) -> Result<Vec<Probe>> {
    let (recs, _) = archive::read_file(path)?;
    let mut map: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for (n, t) in recs {
        map.insert(n, t.into_f64()?);
    }
    let bad = |e: ndarray::ShapeError| EftError::CorruptArchive(e.to_string());
    let mut out = Vec::new();
    for t in 1.. {
        let (Some(x), Some(l)) = (map.remove(&format!("task{t}.x")), map.remove(&format!("task{t}.logits"))) else {
            break;
        };
        out.push(Probe {
            task_id: t,
            x: x.into_dimensionality().map_err(bad)?,
            logits: l.into_dimensionality().map_err(bad)?,
        });
    }
    Ok(out)
}
