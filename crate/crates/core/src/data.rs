//! Task sequences: class-incremental splits, heterogeneous dataset chains,
//! a seeded synthetic image generator, an optional CIFAR binary loader and the
//! seeded minibatch order.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArchiveTensor, Record};
use crate::eft::FeatureMap;
use crate::error::{EftError, Result};
use crate::registry::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Global class ids; local label `j` is `classes[j]`.
    pub classes: Vec<usize>,
    /// Source dataset for heterogeneous chains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
    pub total_classes: usize,
    pub seed: u64,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Class lists are non-empty and pairwise disjoint, and cover
    /// `0..total_classes` exactly.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if t.classes.is_empty() {
                return Err(EftError::InvalidSplit(format!("task {} has no classes", t.task_id)));
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(EftError::InvalidSplit(format!("class {c} appears in two tasks")));
                }
            }
        }
        if seen.len() != self.total_classes || seen.iter().next_back().is_some_and(|&m| m >= self.total_classes) {
            return Err(EftError::InvalidSplit(format!(
                "tasks cover {} classes, expected 0..{}",
                seen.len(),
                self.total_classes
            )));
        }
        Ok(())
    }
}

/// Seeded permutation of `0..c` cut into `t` contiguous chunks.
pub fn build_split(c: usize, t: usize, seed: u64) -> Result<TaskSequence> {
    if t == 0 || c == 0 || !c.is_multiple_of(t) {
        return Err(EftError::InvalidSplit(format!("{t} tasks do not evenly divide {c} classes")));
    }
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut stream_rng(seed, &[0x73706c6974]));
    let per = c / t;
    let tasks = perm
        .chunks(per)
        .enumerate()
        .map(|(i, chunk)| TaskSpec {
            task_id: i + 1,
            classes: chunk.to_vec(),
            source: None,
        })
        .collect();
    Ok(TaskSequence {
        tasks,
        total_classes: c,
        seed,
    })
}

/// Class count of a named dataset.
pub fn dataset_classes(name: &str) -> Result<usize> {
    match name {
        "svhn" | "cifar10" | "mnist" => Ok(10),
        "cifar100" => Ok(100),
        "tiny-imagenet" => Ok(200),
        "imagenet" => Ok(1000),
        other => Err(EftError::UnknownDataset(other.to_string())),
    }
}

/// One task per dataset, in the given order. Global class ids are assigned
/// by position in the chain.
pub fn build_heterogeneous(names: &[&str]) -> Result<TaskSequence> {
    let mut tasks = Vec::new();
    let mut offset = 0;
    for (i, name) in names.iter().enumerate() {
        let n = dataset_classes(name)?;
        tasks.push(TaskSpec {
            task_id: i + 1,
            classes: (offset..offset + n).collect(),
            source: Some(name.to_string()),
        });
        offset += n;
    }
    if tasks.is_empty() {
        return Err(EftError::InvalidSplit("empty dataset chain".into()));
    }
    Ok(TaskSequence {
        tasks,
        total_classes: offset,
        seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// `(channels, height, width)` of each image.
    pub shape: [usize; 3],
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    /// Scale of the per-class cluster centres.
    pub sep: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Correlation between a class centre and the centre of the class at
    /// the same local position in the previous task (0 = independent).
    pub similarity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: [3, 8, 8],
            classes_per_task: 4,
            samples_per_class: 50,
            sep: 1.0,
            noise: 0.5,
            similarity: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) || self.classes_per_task == 0 {
            return Err(EftError::Config("synthetic shape and classes must be non-zero".into()));
        }
        if self.samples_per_class < 5 {
            return Err(EftError::TooFewSamples {
                needed: 5,
                got: self.samples_per_class,
            });
        }
        if !(self.sep >= 0.0 && self.noise >= 0.0 && (0.0..=1.0).contains(&self.similarity)) {
            return Err(EftError::Config("synthetic sep/noise must be >= 0, similarity in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Materialised data of one task; labels are local (`0..classes.len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub train_x: FeatureMap,
    pub train_y: Vec<usize>,
    pub test_x: FeatureMap,
    pub test_y: Vec<usize>,
}

impl TaskData {
    pub fn global_test_labels(&self) -> Vec<usize> {
        self.test_y.iter().map(|&y| self.classes[y]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Materialized {
    pub sequence: TaskSequence,
    pub tasks: Vec<TaskData>,
}

/// Gaussian clusters: every class gets a centre `sep · z` (or a blend with
/// the previous task's centre at the same position when `similarity > 0`);
/// each sample is `centre + noise · z'`. The first 80% of every class's
/// samples go to training, the rest to test.
pub fn generate_synthetic(spec: &SyntheticSpec, num_tasks: usize) -> Result<Materialized> {
    spec.validate()?;
    if num_tasks == 0 {
        return Err(EftError::InvalidSplit("need at least one task".into()));
    }
    let [c, h, w] = spec.shape;
    let dim = c * h * w;
    let per = spec.classes_per_task;
    let n_train = spec.samples_per_class * 4 / 5;
    let n_test = spec.samples_per_class - n_train;
    let mut center_rng = stream_rng(spec.seed, &[0x63656e74]);
    let mut prev_centers: Option<Vec<Vec<f64>>> = None;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut specs = Vec::with_capacity(num_tasks);
    let rho = spec.similarity;
    for t in 0..num_tasks {
        let centers: Vec<Vec<f64>> = (0..per)
            .map(|j| {
                (0..dim)
                    .map(|k| {
                        let fresh: f64 = center_rng.sample(StandardNormal);
                        match &prev_centers {
                            Some(p) if rho > 0.0 => rho * p[j][k] + (1.0 - rho * rho).sqrt() * fresh,
                            _ => fresh,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut sample_rng = stream_rng(spec.seed, &[0x73616d70, t as u64]);
        let mut fill = |n: usize| {
            let mut x = Array4::<f64>::zeros((n * per, c, h, w));
            let mut y = Vec::with_capacity(n * per);
            for (j, center) in centers.iter().enumerate() {
                for i in 0..n {
                    let row = j * n + i;
                    let mut img = x.index_axis_mut(Axis(0), row);
                    for (v, &m) in img.iter_mut().zip(center) {
                        let z: f64 = sample_rng.sample(StandardNormal);
                        *v = spec.sep * m + spec.noise * z;
                    }
                    y.push(j);
                }
            }
            (x, y)
        };
        let (train_x, train_y) = fill(n_train);
        let (test_x, test_y) = fill(n_test);
        let classes: Vec<usize> = (t * per..(t + 1) * per).collect();
        specs.push(TaskSpec {
            task_id: t + 1,
            classes: classes.clone(),
            source: Some("synthetic".into()),
        });
        tasks.push(TaskData {
            task_id: t + 1,
            classes,
            train_x,
            train_y,
            test_x,
            test_y,
        });
        prev_centers = Some(centers);
    }
    Ok(Materialized {
        sequence: TaskSequence {
            tasks: specs,
            total_classes: num_tasks * per,
            seed: spec.seed,
        },
        tasks,
    })
}

/// Minibatch index lists for one epoch; a pure function of
/// `(n, batch_size, seed, epoch)`. The last batch may be short but is
/// merged into its predecessor when it would hold a single sample (batch
/// statistics need at least two).
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &[0x6261746368, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("len > 1");
        batches.last_mut().expect("len > 0").extend(last);
    }
    batches
}

/// Rows of `x` selected by `idx`.
pub fn gather(x: &FeatureMap, idx: &[usize]) -> FeatureMap {
    x.select(Axis(0), idx)
}

/// Random horizontal flips and zero-padded random crops, applied per sample.
pub fn augment(x: &mut FeatureMap, flip: bool, crop_pad: usize, rng: &mut impl Rng) {
    let (_, _, h, w) = x.dim();
    for mut img in x.outer_iter_mut() {
        if flip && rng.random_bool(0.5) {
            let mirrored = img.slice(s![.., .., ..;-1]).to_owned();
            img.assign(&mirrored);
        }
        if crop_pad > 0 {
            let dy = rng.random_range(0..=2 * crop_pad) as isize - crop_pad as isize;
            let dx = rng.random_range(0..=2 * crop_pad) as isize - crop_pad as isize;
            let src = img.to_owned();
            img.fill(0.0);
            for yy in 0..h as isize {
                let sy = yy + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    for ch in 0..src.shape()[0] {
                        img[[ch, yy as usize, xx as usize]] = src[[ch, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
}

/// Writes a materialised sequence in the tensor-archive format.
pub fn save_cache(path: &Path, data: &Materialized) -> Result<String> {
    let mut recs: Vec<Record> = Vec::new();
    let as_i64 = |v: &[usize]| ArchiveTensor::I64(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(|&u| u as i64).collect()).expect("1-d"));
    recs.push(("total_classes".into(), as_i64(&[data.sequence.total_classes])));
    recs.push(("seed".into(), ArchiveTensor::I64(ArrayD::from_elem(IxDyn(&[1]), data.sequence.seed as i64))));
    for t in &data.tasks {
        let p = format!("task{}", t.task_id);
        recs.push((format!("{p}.classes"), as_i64(&t.classes)));
        recs.push((format!("{p}.train_x"), ArchiveTensor::F64(t.train_x.clone().into_dyn())));
        recs.push((format!("{p}.train_y"), as_i64(&t.train_y)));
        recs.push((format!("{p}.test_x"), ArchiveTensor::F64(t.test_x.clone().into_dyn())));
        recs.push((format!("{p}.test_y"), as_i64(&t.test_y)));
    }
    archive::write_file(path, &recs)
}

pub fn load_cache(path: &Path) -> Result<Materialized> {
    let (recs, _) = archive::read_file(path)?;
    let mut map: std::collections::BTreeMap<String, ArchiveTensor> = recs.into_iter().collect();
    let mut take = |name: &str| map.remove(name).ok_or_else(|| EftError::CorruptArchive(format!("cache lacks `{name}`")));
    let ints = |t: ArchiveTensor| -> Result<Vec<usize>> { Ok(t.into_i64()?.iter().map(|&v| v as usize).collect()) };
    let map4 = |t: ArchiveTensor| -> Result<FeatureMap> {
        t.into_f64()?
            .into_dimensionality()
            .map_err(|e| EftError::CorruptArchive(e.to_string()))
    };
    let total_classes = ints(take("total_classes")?)?[0];
    let seed = take("seed")?.into_i64()?[[0]] as u64;
    let mut tasks = Vec::new();
    let mut specs = Vec::new();
    for t in 1.. {
        let p = format!("task{t}");
        let Ok(classes) = take(&format!("{p}.classes")) else { break };
        let classes = ints(classes)?;
        specs.push(TaskSpec {
            task_id: t,
            classes: classes.clone(),
            source: Some("synthetic".into()),
        });
        tasks.push(TaskData {
            task_id: t,
            classes,
            train_x: map4(take(&format!("{p}.train_x"))?)?,
            train_y: ints(take(&format!("{p}.train_y"))?)?,
            test_x: map4(take(&format!("{p}.test_x"))?)?,
            test_y: ints(take(&format!("{p}.test_y"))?)?,
        });
    }
    Ok(Materialized {
        sequence: TaskSequence {
            tasks: specs,
            total_classes,
            seed,
        },
        tasks,
    })
}

/// Per-channel statistics used for CIFAR normalisation.
const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Reads the CIFAR binary distribution (`cifar-10-batches-bin` or
/// `cifar-100-binary`) and returns normalised `(train, test)` image/label
/// pairs with fine labels.
#[allow(clippy::type_complexity)]
pub fn load_cifar_binary(dir: &Path, classes: usize) -> Result<((FeatureMap, Vec<usize>), (FeatureMap, Vec<usize>))> {
    let (train_files, test_files, label_bytes): (Vec<&str>, Vec<&str>, usize) = match classes {
        10 => (
            vec!["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
            vec!["test_batch.bin"],
            1,
        ),
        100 => (vec!["train.bin"], vec!["test.bin"], 2),
        other => return Err(EftError::UnknownDataset(format!("cifar with {other} classes"))),
    };
    let read = |files: &[&str]| -> Result<(FeatureMap, Vec<usize>)> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in files {
            let path = dir.join(f);
            if !path.exists() {
                return Err(EftError::MissingCheckpoint(path));
            }
            let bytes = std::fs::read(&path).map_err(|e| EftError::io(&path, e))?;
            let rec = label_bytes + 3072;
            if bytes.len() % rec != 0 {
                return Err(EftError::CorruptArchive(format!("{} is not a CIFAR binary file", path.display())));
            }
            for chunk in bytes.chunks_exact(rec) {
                labels.push(chunk[label_bytes - 1] as usize);
                for (i, &p) in chunk[label_bytes..].iter().enumerate() {
                    let ch = i / 1024;
                    pixels.push((p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
                }
            }
        }
        let n = labels.len();
        let x = Array4::from_shape_vec((n, 3, 32, 32), pixels).map_err(|e| EftError::CorruptArchive(e.to_string()))?;
        Ok((x, labels))
    };
    Ok((read(&train_files)?, read(&test_files)?))
}

/// Splits labelled image pools into per-task data following `seq`.
pub fn materialize(
    seq: &TaskSequence,
    train: &(FeatureMap, Vec<usize>),
    test: &(FeatureMap, Vec<usize>),
) -> Result<Materialized> {
    seq.validate()?;
    let pick = |pool: &(FeatureMap, Vec<usize>), classes: &[usize]| {
        let mut idx = Vec::new();
        let mut y = Vec::new();
        for (i, label) in pool.1.iter().enumerate() {
            if let Some(local) = classes.iter().position(|c| c == label) {
                idx.push(i);
                y.push(local);
            }
        }
        (pool.0.select(Axis(0), &idx), y)
    };
    let tasks = seq
        .tasks
        .iter()
        .map(|t| {
            let (train_x, train_y) = pick(train, &t.classes);
            let (test_x, test_y) = pick(test, &t.classes);
            TaskData {
                task_id: t.task_id,
                classes: t.classes.clone(),
                train_x,
                train_y,
                test_x,
                test_y,
            }
        })
        .collect();
    Ok(Materialized {
        sequence: seq.clone(),
        tasks,
    })
}

/// Standard-normal noise batch `[n, dim, 1, 1]` for the generator.
pub fn noise_batch(n: usize, dim: usize, seed: u64, tag: u64) -> FeatureMap {
    let mut rng = stream_rng(seed, &[0x6e6f697365, tag]);
    Array4::from_shape_simple_fn((n, dim, 1, 1), || StandardNormal.sample(&mut rng))
}

/// A 2-mode image distribution: each sample is one of two fixed patterns
/// (mode chosen uniformly) plus small noise, rescaled into `[-1, 1]`.
pub fn two_mode_images(n: usize, shape: [usize; 3], noise: f64, seed: u64, task: usize) -> FeatureMap {
    let mut rng = stream_rng(seed, &[0x6d6f646573, task as u64]);
    let [c, h, w] = shape;
    let modes: Vec<Array4<f64>> = (0..2)
        .map(|_| Array4::from_shape_simple_fn((1, c, h, w), || 0.6 * rng.random_range(-1.0..1.0)))
        .collect();
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        let m = &modes[rng.random_range(0..2)];
        let mut img = x.slice_mut(s![i..i + 1, .., .., ..]);
        for (v, &mu) in img.iter_mut().zip(m.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *v = (mu + noise * z).clamp(-1.0, 1.0);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_covers_all_classes() {
        let seq = build_split(100, 10, 3).unwrap();
        assert_eq!(seq.num_tasks(), 10);
        assert!(seq.tasks.iter().all(|t| t.classes.len() == 10));
        seq.validate().unwrap();
        assert_eq!(seq, build_split(100, 10, 3).unwrap());
        assert_ne!(seq, build_split(100, 10, 4).unwrap());
        assert!(matches!(build_split(10, 3, 0), Err(EftError::InvalidSplit(_))));
    }

    #[test]
    fn heterogeneous_chain() {
        let seq = build_heterogeneous(&["svhn", "cifar10", "cifar100"]).unwrap();
        let counts: Vec<usize> = seq.tasks.iter().map(|t| t.classes.len()).collect();
        assert_eq!(counts, vec![10, 10, 100]);
        seq.validate().unwrap();
        let rev = build_heterogeneous(&["cifar100", "cifar10", "svhn"]).unwrap();
        assert_eq!(rev.tasks[0].source.as_deref(), Some("cifar100"));
        assert_eq!(build_heterogeneous(&["svhn"]).unwrap().num_tasks(), 1);
        assert!(matches!(build_heterogeneous(&["mars"]), Err(EftError::UnknownDataset(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec, 2).unwrap();
        let b = generate_synthetic(&spec, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tasks[0].train_x.dim(), (160, 3, 8, 8));
        assert_eq!(a.tasks[0].test_x.dim(), (40, 3, 8, 8));
        a.sequence.validate().unwrap();
    }

    #[test]
    fn batch_order_is_pure_and_complete() {
        let a = batch_order(23, 8, 5, 2);
        assert_eq!(a, batch_order(23, 8, 5, 2));
        assert_ne!(a, batch_order(23, 8, 5, 3));
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert!(batch_order(17, 8, 0, 0).iter().all(|b| b.len() >= 2));
    }

    #[test]
    fn flip_mirrors_width() {
        let x = Array4::from_shape_fn((1, 1, 1, 3), |(_, _, _, k)| k as f64);
        // Seeds are searched so that the single coin flip lands on "flip".
        for seed in 0..64 {
            let mut y = x.clone();
            augment(&mut y, true, 0, &mut stream_rng(seed, &[]));
            if y != x {
                assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0, 0.0]);
                return;
            }
        }
        panic!("no seed produced a flip");
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&SyntheticSpec::default(), 2).unwrap();
        let path = dir.path().join("synthetic.tsr");
        save_cache(&path, &data).unwrap();
        assert_eq!(load_cache(&path).unwrap(), data);
    }
}
