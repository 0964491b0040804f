//! Efficient Feature Transformations for continual learning.
//!
//! A frozen global network θ is adapted to each task by a tiny set of
//! task-local parameters τ_t: grouped 3×3 spatial and grouped 1×1 pointwise
//! convolutions after every convolution, and a diagonal calibration after the
//! penultimate fully connected layer. Task identity is inferred at test time
//! by picking the task whose parameters yield the lowest-entropy prediction.

pub mod archive;
pub mod autodiff;
pub mod backbones;
pub mod config;
pub mod cost;
pub mod data;
pub mod eft;
pub mod error;
pub mod gan;
pub mod inference;
pub mod kernels;
pub mod margin;
pub mod plot;
pub mod registry;
pub mod run;
pub mod trainer;

pub use backbones::{build_arch, build_arch_for_input, ArchSpec};
pub use eft::{CompositionMode, EftConvParams, EftConvSpec, EftFcParams, FeatureMap};
pub use error::{EftError, Result};
pub use margin::{GaussianStats, MarginConfig};
pub use registry::{GlobalParams, InitPolicy, Registry, TaskHead, TaskParams};
