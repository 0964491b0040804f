//! Global/local parameter partition, freeze enforcement and checkpoints.
//!
//! A [`Registry`] owns the shared parameters θ and the ordered per-task
//! parameter sets τ_1..τ_T. Finalizing a task records a SHA-256 digest of its
//! tensors; finalizing the first task also freezes θ. Every mutation path
//! checks the frozen/finalized flags, and digests make silent leakage
//! detectable after the fact.
//!
//! Checkpoint directory layout:
//!
//! ```text
//! manifest.json   architecture, EFT spec, task → class map, digests
//! global.tsr      θ (tensor archive)
//! task_<t>.tsr    τ_t (tensor archive), t = 1..T
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Ix1, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveTensor, Record};
use crate::autodiff::Tensor;
use crate::backbones::{is_buffer_name, ArchSpec, NormStats, TensorRole};
use crate::eft::{EftConvParams, EftConvSpec, EftFcParams};
use crate::error::{EftError, Result};
use crate::margin::GaussianStats;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Derives an independent RNG stream from a base seed and a purpose tag.
pub(crate) fn stream_rng(seed: u64, tag: &[u64]) -> ChaCha8Rng {
    // SplitMix64 finaliser over the tag words keeps streams decorrelated.
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tag {
        h = h.wrapping_add(t).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Shared network parameters θ (weights, norm affine parameters and running
/// statistics), keyed by layer path.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    tensors: BTreeMap<String, Tensor>,
    frozen: bool,
}

impl GlobalParams {
    /// He-normal convolution kernels, `N(0, 1/fan_in)` FC weights, zero
    /// biases, unit norm scales and fresh running statistics.
    pub fn init(arch: &ArchSpec, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[0x6c6f62]);
        let mut tensors = BTreeMap::new();
        for (name, shape, role) in arch.global_tensor_shapes() {
            let t = match role {
                TensorRole::ConvWeight | TensorRole::FcWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if role == TensorRole::ConvWeight { 2.0 } else { 1.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    Tensor::from_shape_simple_fn(shape, || normal.sample(&mut rng))
                }
                TensorRole::Bias | TensorRole::RunningMean => Tensor::zeros(shape),
                TensorRole::NormScale | TensorRole::RunningVar => Tensor::ones(shape),
            };
            tensors.insert(name, t);
        }
        Self { tensors, frozen: false }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| EftError::dims(format!("missing global tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access for the optimizer; rejected once frozen.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(EftError::FrozenParameter(format!("global tensor `{name}`")));
        }
        self.tensors
            .get_mut(name)
            .ok_or_else(|| EftError::dims(format!("missing global tensor `{name}`")))
    }

    /// Exponential-moving-average update of a norm layer's running statistics.
    pub fn update_running_stats(&mut self, stats: &NormStats, momentum: f64) -> Result<()> {
        // Running variance tracks the unbiased estimate.
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let rm = self.get_mut(&format!("{}.running_mean", stats.path))?;
        for (r, m) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = self.get_mut(&format!("{}.running_var", stats.path))?;
        for (r, v) in rv.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
        Ok(())
    }

    /// Learned scalars (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer_name(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn records(&self) -> Vec<Record> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), ArchiveTensor::F64(t.clone())))
            .collect()
    }

    pub fn digest(&self) -> String {
        archive::content_digest(&self.records())
    }

    fn from_records(records: Vec<Record>, frozen: bool) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, t) in records {
            tensors.insert(name, t.into_f64()?);
        }
        Ok(Self { tensors, frozen })
    }
}

/// Per-task classifier head `logits = features · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl TaskHead {
    pub fn random(classes: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / feature_dim.max(1) as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_simple_fn((classes, feature_dim), || normal.sample(rng)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Local parameters τ_t of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    /// 1-based task index.
    pub task_id: usize,
    /// Global class labels; local label `j` maps to `classes[j]`.
    pub classes: Vec<usize>,
    pub conv: Vec<EftConvParams>,
    pub fc: Vec<EftFcParams>,
    pub head: Option<TaskHead>,
    pub finalized: bool,
}

impl TaskParams {
    pub fn num_params(&self) -> usize {
        self.conv.iter().map(EftConvParams::num_params).sum::<usize>()
            + self.fc.iter().map(EftFcParams::dim).sum::<usize>()
            + self.head.as_ref().map_or(0, TaskHead::num_params)
    }

    /// Tensors in canonical order; the digest and archive use this order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.conv.iter().enumerate() {
            if let Some(w) = &p.spatial {
                out.push((format!("site{i}.spatial"), w.clone().into_dyn()));
            }
            if let Some(w) = &p.pointwise {
                out.push((format!("site{i}.pointwise"), w.clone().into_dyn()));
            }
        }
        for (i, p) in self.fc.iter().enumerate() {
            out.push((format!("fc{i}.e"), p.e.clone().into_dyn()));
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), h.weight.clone().into_dyn()));
            out.push(("head.bias".into(), h.bias.clone().into_dyn()));
        }
        out
    }

    /// Mutable views in [`TaskParams::named_tensors`] order; rejected once
    /// finalized.
    pub fn tensors_mut(&mut self) -> Result<Vec<(String, ndarray::ArrayViewMutD<'_, f64>)>> {
        if self.finalized {
            return Err(EftError::FrozenParameter(format!("task {} is finalized", self.task_id)));
        }
        let mut out = Vec::new();
        for (i, p) in self.conv.iter_mut().enumerate() {
            if let Some(w) = &mut p.spatial {
                out.push((format!("site{i}.spatial"), w.view_mut().into_dyn()));
            }
            if let Some(w) = &mut p.pointwise {
                out.push((format!("site{i}.pointwise"), w.view_mut().into_dyn()));
            }
        }
        for (i, p) in self.fc.iter_mut().enumerate() {
            out.push((format!("fc{i}.e"), p.e.view_mut().into_dyn()));
        }
        if let Some(h) = &mut self.head {
            out.push(("head.weight".into(), h.weight.view_mut().into_dyn()));
            out.push(("head.bias".into(), h.bias.view_mut().into_dyn()));
        }
        Ok(out)
    }

    pub fn records(&self) -> Vec<Record> {
        let mut recs: Vec<Record> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, ArchiveTensor::F64(t)))
            .collect();
        let classes = self.classes.iter().map(|&c| c as i64).collect::<Vec<_>>();
        recs.push(("classes".into(), ArchiveTensor::I64(ndarray::Array1::from(classes).into_dyn())));
        recs
    }

    pub fn digest(&self) -> String {
        archive::content_digest(&self.records())
    }

    fn from_records(
        task_id: usize,
        records: Vec<Record>,
        arch: &ArchSpec,
        spec: &EftConvSpec,
        finalized: bool,
    ) -> Result<Self> {
        let mut map: BTreeMap<String, ArchiveTensor> = records.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| EftError::CorruptArchive(format!("task {task_id}: missing `{name}`")))
        };
        let bad = |e: ndarray::ShapeError| EftError::CorruptArchive(e.to_string());
        let mut conv = Vec::new();
        for (i, site) in arch.conv_sites().iter().enumerate() {
            let spatial = if spec.a > 0 {
                Some(take(&format!("site{i}.spatial"))?.into_f64()?.into_dimensionality::<Ix4>().map_err(bad)?)
            } else {
                None
            };
            let pointwise = if spec.b > 0 {
                Some(take(&format!("site{i}.pointwise"))?.into_f64()?.into_dimensionality::<Ix4>().map_err(bad)?)
            } else {
                None
            };
            let p = EftConvParams { spatial, pointwise };
            p.check(spec, site.width)?;
            conv.push(p);
        }
        let mut fc = Vec::new();
        for i in 0..arch.fc_sites().len() {
            let e = take(&format!("fc{i}.e"))?.into_f64()?.into_dimensionality::<Ix1>().map_err(bad)?;
            fc.push(EftFcParams { e });
        }
        let head = if arch.head_classes.is_some() {
            Some(TaskHead {
                weight: take("head.weight")?.into_f64()?.into_dimensionality::<Ix2>().map_err(bad)?,
                bias: take("head.bias")?.into_f64()?.into_dimensionality::<Ix1>().map_err(bad)?,
            })
        } else {
            None
        };
        let classes = take("classes")?.into_i64()?.iter().map(|&c| c as usize).collect();
        Ok(Self {
            task_id,
            classes,
            conv,
            fc,
            head,
            finalized,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    ForwardTransfer,
    Random,
    Identity,
}

impl FromStr for InitPolicy {
    type Err = EftError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward_transfer" => Ok(Self::ForwardTransfer),
            "random" => Ok(Self::Random),
            "identity" => Ok(Self::Identity),
            other => Err(EftError::Config(format!("unknown init policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub finalized: bool,
    pub digest: Option<String>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub arch_name: String,
    pub arch: ArchSpec,
    pub spec: EftConvSpec,
    pub seed: u64,
    pub global_frozen: bool,
    pub global_digest: String,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub stored_stats: BTreeMap<usize, GaussianStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub arch: ArchSpec,
    pub spec: EftConvSpec,
    seed: u64,
    global: GlobalParams,
    tasks: Vec<TaskParams>,
    digests: BTreeMap<usize, String>,
    global_digest: Option<String>,
    stored_stats: BTreeMap<usize, GaussianStats>,
}

impl Registry {
    /// A registry with freshly initialized θ and no tasks. Fails if `spec`
    /// is invalid at any insertion site.
    pub fn new(arch: ArchSpec, spec: EftConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        for site in arch.conv_sites() {
            spec.check_site(site.width)?;
        }
        let global = GlobalParams::init(&arch, seed);
        Ok(Self {
            arch,
            spec,
            seed,
            global,
            tasks: Vec::new(),
            digests: BTreeMap::new(),
            global_digest: None,
            stored_stats: BTreeMap::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn global(&self) -> &GlobalParams {
        &self.global
    }

    /// θ for the optimizer; fails once frozen.
    pub fn global_mut(&mut self) -> Result<&mut GlobalParams> {
        if self.global.frozen {
            return Err(EftError::FrozenParameter("global parameters are frozen".into()));
        }
        Ok(&mut self.global)
    }

    /// Replaces θ wholesale (e.g. with a pretrained or copied network);
    /// only possible before the first task is finalized.
    pub fn set_global(&mut self, global: GlobalParams) -> Result<()> {
        self.global_mut()?;
        self.global = GlobalParams { frozen: false, ..global };
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskParams] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> Result<&TaskParams> {
        t.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or(EftError::UnknownTask(t))
    }

    /// τ_t for the optimizer; fails once finalized.
    pub fn task_mut(&mut self, t: usize) -> Result<&mut TaskParams> {
        let task = t
            .checked_sub(1)
            .and_then(|i| self.tasks.get_mut(i))
            .ok_or(EftError::UnknownTask(t))?;
        if task.finalized {
            return Err(EftError::FrozenParameter(format!("task {t} is finalized")));
        }
        Ok(task)
    }

    pub fn finalized_tasks(&self) -> impl Iterator<Item = &TaskParams> {
        self.tasks.iter().filter(|t| t.finalized)
    }

    /// The non-finalized task currently being trained, if any.
    pub fn current_task(&self) -> Option<usize> {
        self.tasks.last().filter(|t| !t.finalized).map(|t| t.task_id)
    }

    pub fn task_digest(&self, t: usize) -> Option<&str> {
        self.digests.get(&t).map(String::as_str)
    }

    pub fn global_digest(&self) -> Option<&str> {
        self.global_digest.as_deref()
    }

    pub fn stored_stats(&self) -> &BTreeMap<usize, GaussianStats> {
        &self.stored_stats
    }

    pub fn set_stored_stats(&mut self, t: usize, stats: GaussianStats) -> Result<()> {
        self.task(t)?;
        self.stored_stats.insert(t, stats);
        Ok(())
    }

    /// Registers τ_{T+1} for `classes`. EFT parameters follow `policy`; the
    /// head is always freshly random since class counts may differ.
    pub fn add_task(&mut self, classes: Vec<usize>, policy: InitPolicy) -> Result<&TaskParams> {
        if let Some(t) = self.current_task() {
            return Err(EftError::UnfinalizedTask(t));
        }
        if classes.is_empty() {
            return Err(EftError::InvalidSplit("a task needs at least one class".into()));
        }
        let t = self.tasks.len() + 1;
        let prev = self.tasks.last();
        if policy == InitPolicy::ForwardTransfer && prev.is_none() {
            return Err(EftError::NoPreviousTask);
        }
        let mut rng = stream_rng(self.seed, &[0x7461736b, t as u64]);
        let conv = match (policy, prev) {
            (InitPolicy::ForwardTransfer, Some(p)) => p.conv.iter().map(EftConvParams::from_previous).collect(),
            (InitPolicy::Identity, _) => self
                .arch
                .conv_sites()
                .iter()
                .map(|s| EftConvParams::identity(&self.spec, s.width))
                .collect::<Result<_>>()?,
            _ => self
                .arch
                .conv_sites()
                .iter()
                .map(|s| EftConvParams::random_with(&self.spec, s.width, &mut rng))
                .collect::<Result<_>>()?,
        };
        let fc = match (policy, prev) {
            (InitPolicy::ForwardTransfer, Some(p)) => p.fc.iter().map(EftFcParams::from_previous).collect(),
            _ => self.arch.fc_sites().iter().map(|s| EftFcParams::identity(s.width)).collect(),
        };
        let head = self
            .arch
            .head_classes
            .map(|_| TaskHead::random(classes.len(), self.arch.feature_dim(), &mut rng));
        self.tasks.push(TaskParams {
            task_id: t,
            classes,
            conv,
            fc,
            head,
            finalized: false,
        });
        Ok(self.tasks.last().expect("just pushed"))
    }

    /// Freezes τ_t (and θ after the first task) and records its digest.
    pub fn finalize_task(&mut self, t: usize) -> Result<String> {
        let task = self.task(t)?;
        if task.finalized {
            return Err(EftError::AlreadyFinalized(t));
        }
        if self.current_task() != Some(t) {
            return Err(EftError::UnknownTask(t));
        }
        let idx = t - 1;
        self.tasks[idx].finalized = true;
        let digest = self.tasks[idx].digest();
        self.digests.insert(t, digest.clone());
        if !self.global.frozen {
            self.global.frozen = true;
            self.global_digest = Some(self.global.digest());
        }
        Ok(digest)
    }

    /// The registry as it stood right after task `t` was finalized: the
    /// first `t` tasks, with θ unchanged (it is frozen from task 1 on).
    pub fn truncated(&self, t: usize) -> Result<Self> {
        if t > self.tasks.len() {
            return Err(EftError::UnknownTask(t));
        }
        let mut r = self.clone();
        r.tasks.truncate(t);
        r.digests.retain(|&k, _| k <= t);
        r.stored_stats.retain(|&k, _| k <= t);
        Ok(r)
    }

    /// Recomputes every digest and compares against the recorded values.
    pub fn verify(&self) -> Result<()> {
        if let Some(expected) = &self.global_digest {
            let found = self.global.digest();
            if &found != expected {
                return Err(EftError::DigestMismatch {
                    what: "global parameters".into(),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        for task in self.finalized_tasks() {
            let expected = &self.digests[&task.task_id];
            let found = task.digest();
            if &found != expected {
                return Err(EftError::DigestMismatch {
                    what: format!("task {}", task.task_id),
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: CHECKPOINT_VERSION,
            arch_name: self.arch.name.clone(),
            arch: self.arch.clone(),
            spec: self.spec,
            seed: self.seed,
            global_frozen: self.global.frozen,
            global_digest: self.global.digest(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskEntry {
                    task_id: t.task_id,
                    classes: t.classes.clone(),
                    finalized: t.finalized,
                    digest: self.digests.get(&t.task_id).cloned(),
                    file: format!("task_{}.tsr", t.task_id),
                })
                .collect(),
            stored_stats: self.stored_stats.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| EftError::io(dir, e))?;
        archive::write_file(&dir.join("global.tsr"), &self.global.records())?;
        for task in &self.tasks {
            archive::write_file(&dir.join(format!("task_{}.tsr", task.task_id)), &task.records())?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(&path, json).map_err(|e| EftError::io(&path, e))
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(EftError::MissingCheckpoint(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| EftError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(EftError::VersionMismatch {
                found: manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(manifest)
    }

    /// Loads a checkpoint, verifying every archive against the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let (records, digest) = archive::read_file(&dir.join("global.tsr"))?;
        check_digest("global.tsr", &manifest.global_digest, &digest)?;
        let global = GlobalParams::from_records(records, manifest.global_frozen)?;
        let mut tasks = Vec::new();
        let mut digests = BTreeMap::new();
        for entry in &manifest.tasks {
            let (records, digest) = archive::read_file(&dir.join(&entry.file))?;
            if let Some(expected) = &entry.digest {
                check_digest(&entry.file, expected, &digest)?;
                digests.insert(entry.task_id, digest);
            }
            let task = TaskParams::from_records(entry.task_id, records, &manifest.arch, &manifest.spec, entry.finalized)?;
            if task.classes != entry.classes {
                return Err(EftError::CorruptArchive(format!(
                    "task {} class list disagrees with manifest",
                    entry.task_id
                )));
            }
            tasks.push(task);
        }
        Ok(Self {
            arch: manifest.arch,
            spec: manifest.spec,
            seed: manifest.seed,
            global_digest: manifest.global_frozen.then_some(manifest.global_digest),
            global,
            tasks,
            digests,
            stored_stats: manifest.stored_stats,
        })
    }
}

fn check_digest(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(EftError::DigestMismatch {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Named tensor shapes, used by tests and the cost oracle.
pub fn tensor_shapes(task: &TaskParams) -> Vec<(String, Vec<usize>)> {
    task.named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::build_arch_for_input;

    fn registry() -> Registry {
        let arch = build_arch_for_input("smallcnn", [3, 8, 8]).unwrap();
        Registry::new(arch, EftConvSpec::serial(4, 8).unwrap(), 7).unwrap()
    }

    #[test]
    fn first_task_leaves_theta_trainable() {
        let mut r = registry();
        r.add_task(vec![0, 1], InitPolicy::Random).unwrap();
        assert_eq!(r.num_tasks(), 1);
        assert!(!r.global().is_frozen());
        assert!(r.global_mut().is_ok());
    }

    #[test]
    fn forward_transfer_needs_a_previous_task() {
        let mut r = registry();
        assert!(matches!(
            r.add_task(vec![0], InitPolicy::ForwardTransfer),
            Err(EftError::NoPreviousTask)
        ));
    }

    #[test]
    fn forward_transfer_copies_eft_but_not_head() {
        let mut r = registry();
        r.add_task(vec![0, 1], InitPolicy::Random).unwrap();
        r.finalize_task(1).unwrap();
        r.add_task(vec![2, 3, 4], InitPolicy::ForwardTransfer).unwrap();
        let (t1, t2) = (r.task(1).unwrap(), r.task(2).unwrap());
        assert_eq!(t1.conv, t2.conv);
        assert_eq!(t1.fc, t2.fc);
        assert_eq!(t2.head.as_ref().unwrap().classes(), 3);
    }

    #[test]
    fn unfinalized_previous_task_blocks_new_one() {
        let mut r = registry();
        r.add_task(vec![0], InitPolicy::Random).unwrap();
        assert!(matches!(r.add_task(vec![1], InitPolicy::Random), Err(EftError::UnfinalizedTask(1))));
    }

    #[test]
    fn finalize_freezes_everything() {
        let mut r = registry();
        r.add_task(vec![0], InitPolicy::Random).unwrap();
        r.finalize_task(1).unwrap();
        assert!(r.global().is_frozen());
        assert!(matches!(r.global_mut(), Err(EftError::FrozenParameter(_))));
        assert!(matches!(r.task_mut(1), Err(EftError::FrozenParameter(_))));
        assert!(matches!(r.finalize_task(1), Err(EftError::AlreadyFinalized(1))));
        r.verify().unwrap();
    }

    #[test]
    fn identical_registries_hash_identically() {
        let (mut a, mut b) = (registry(), registry());
        for r in [&mut a, &mut b] {
            r.add_task(vec![0, 1], InitPolicy::Random).unwrap();
        }
        assert_eq!(a.finalize_task(1).unwrap(), b.finalize_task(1).unwrap());
        assert_eq!(a.global_digest(), b.global_digest());
    }

    #[test]
    fn stream_rngs_are_distinct() {
        use rand::Rng;
        let x: u64 = stream_rng(1, &[1]).random();
        let y: u64 = stream_rng(1, &[2]).random();
        let z: u64 = stream_rng(2, &[1]).random();
        assert!(x != y && x != z && y != z);
    }
}
