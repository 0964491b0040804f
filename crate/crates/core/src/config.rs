//! Run configuration: one JSON document with `data`, `arch`, `eft`, `train`,
//! `margin` and `out_dir` sections. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{build_arch_for_input, ArchSpec};
use crate::data::{build_split, dataset_classes, generate_synthetic, load_cifar_binary, materialize, Materialized, SyntheticSpec};
use crate::eft::{CompositionMode, EftConvSpec};
use crate::error::{EftError, Result};
use crate::margin::MarginConfig;
use crate::registry::InitPolicy;
use crate::trainer::TrainConfig;

/// Synthetic generator settings; the generator seed is `data.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub shape: [usize; 3],
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub sep: f64,
    pub noise: f64,
    pub similarity: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            shape: s.shape,
            classes_per_task: s.classes_per_task,
            samples_per_class: s.samples_per_class,
            sep: s.sep,
            noise: s.noise,
            similarity: s.similarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic`, `cifar10` or `cifar100`.
    pub name: String,
    pub num_tasks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synthetic: SyntheticSection,
    /// Directory of the CIFAR binary distribution.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EftSection {
    pub a: usize,
    pub b: usize,
    #[serde(default)]
    pub mode: CompositionMode,
}

impl Default for EftSection {
    fn default() -> Self {
        Self { a: 8, b: 16, mode: CompositionMode::Serial }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// The full CIFAR recipe.
    Full,
    /// Short workstation schedule.
    Desk,
}

/// Training overrides on top of a profile; every key is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub profile: Option<Profile>,
    pub epochs_first: Option<usize>,
    pub epochs_rest: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub milestones: Option<Vec<usize>>,
    pub milestones_rest: Option<Vec<usize>>,
    pub lr_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub init_policy: Option<InitPolicy>,
    pub first_init: Option<InitPolicy>,
    pub augment: Option<bool>,
    pub probe_size: Option<usize>,
    pub loss_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub arch: String,
    #[serde(default)]
    pub eft: EftSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub margin: MarginConfig,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates; every failure is an [`EftError::Config`].
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| EftError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| EftError::io(path, e))?;
        Ok((Self::from_json(&text)?, text))
    }

    pub fn spec(&self) -> Result<EftConvSpec> {
        EftConvSpec::new(self.eft.a, self.eft.b, self.eft.mode)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.data.name.as_str() {
            "synthetic" => self.data.synthetic.shape,
            _ => [3, 32, 32],
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        build_arch_for_input(&self.arch, self.input_shape())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let s = &self.data.synthetic;
        SyntheticSpec {
            shape: s.shape,
            classes_per_task: s.classes_per_task,
            samples_per_class: s.samples_per_class,
            sep: s.sep,
            noise: s.noise,
            similarity: s.similarity,
            seed: self.data.seed,
        }
    }

    /// The profile defaults with every explicit key applied.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let base = match t.profile.unwrap_or(Profile::Full) {
            Profile::Full => TrainConfig::default(),
            Profile::Desk => TrainConfig::desk(),
        };
        TrainConfig {
            epochs_first: t.epochs_first.unwrap_or(base.epochs_first),
            epochs_rest: t.epochs_rest.unwrap_or(base.epochs_rest),
            lr: t.lr.unwrap_or(base.lr),
            momentum: t.momentum.unwrap_or(base.momentum),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            milestones: t.milestones.clone().unwrap_or(base.milestones),
            milestones_rest: t.milestones_rest.clone().or(base.milestones_rest),
            lr_decay: t.lr_decay.unwrap_or(base.lr_decay),
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            seed: t.seed.unwrap_or(base.seed),
            init_policy: t.init_policy.unwrap_or(base.init_policy),
            first_init: t.first_init.unwrap_or(base.first_init),
            margin: self.margin,
            augment: t.augment.unwrap_or(base.augment),
            probe_size: t.probe_size.unwrap_or(base.probe_size),
            loss_threshold: t.loss_threshold.or(base.loss_threshold),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_tasks == 0 {
            return Err(EftError::Config("data.num_tasks must be positive".into()));
        }
        match self.data.name.as_str() {
            "synthetic" => self.synthetic_spec().validate()?,
            "cifar10" | "cifar100" => {
                build_split(dataset_classes(&self.data.name)?, self.data.num_tasks, self.data.seed)?;
                if self.data.path.is_none() {
                    return Err(EftError::Config(format!("data.path is required for {}", self.data.name)));
                }
            }
            other => return Err(EftError::UnknownDataset(other.to_string())),
        }
        let spec = self.spec()?;
        let arch = self.arch_spec()?;
        for site in arch.conv_sites() {
            spec.check_site(site.width)?;
        }
        self.train_config().validate()
    }

    /// Generates or loads the task sequence.
    pub fn materialize(&self) -> Result<Materialized> {
        match self.data.name.as_str() {
            "synthetic" => generate_synthetic(&self.synthetic_spec(), self.data.num_tasks),
            name => {
                let classes = dataset_classes(name)?;
                let seq = build_split(classes, self.data.num_tasks, self.data.seed)?;
                let dir = self.data.path.as_deref().ok_or_else(|| EftError::Config("data.path missing".into()))?;
                let (train, test) = load_cifar_binary(dir, classes)?;
                materialize(&seq, &train, &test)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"data": {"name": "synthetic", "num_tasks": 2}, "arch": "smallcnn", "out_dir": "run"}"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.eft, EftSection::default());
        assert_eq!(cfg.train_config(), TrainConfig::default());
    }

    #[test]
    fn desk_profile_with_override() {
        let text = MINIMAL.replace(r#""out_dir""#, r#""train": {"profile": "desk", "lr": 0.05}, "out_dir""#);
        let t = RunConfig::from_json(&text).unwrap().train_config();
        assert_eq!(t, TrainConfig { lr: 0.05, ..TrainConfig::desk() });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            MINIMAL.replace(r#""arch""#, r#""colour": 1, "arch""#),
            MINIMAL.replace(r#""num_tasks": 2"#, r#""num_tasks": 2, "shuffle": true"#),
            MINIMAL.replace(r#""out_dir""#, r#""train": {"epochs": 3}, "out_dir""#),
        ] {
            assert!(matches!(RunConfig::from_json(&bad), Err(EftError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn indivisible_site_is_a_config_error() {
        let text = MINIMAL.replace(r#""out_dir""#, r#""eft": {"a": 5, "b": 0}, "out_dir""#);
        assert!(RunConfig::from_json(&text).is_err());
    }
}
