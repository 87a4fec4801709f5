//! Tool-integrated GRPO over a linear-softmax policy and a synthetic search
//! environment, with likelihood-preserving regularizers and the diagnostics
//! needed to observe likelihood displacement.
//!
//! Data flows `env` → `trainer` (rollouts) → `grpo` + `lldreg` (loss) →
//! `policy` (analytic gradients) → `diagnostics` (per-step metrics).

pub mod config;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod grpo;
pub mod lldreg;
pub mod policy;
pub mod trainer;
pub mod trajectory;
pub mod vocab;

pub use config::LabConfig;
pub use diagnostics::{GwhesReport, LldRecord, Phase, PhaseConfig, ProbeResult, StepMetrics};
pub use env::{Corpus, EnvConfig, Task, TaskSet};
pub use error::{LabError, Result};
pub use grpo::{GrpoConfig, StdGuard};
pub use lldreg::{RegConfig, RegVariant};
pub use policy::{Checkpoint, FeatureMap, Gradient, LinearSoftmax, LossValue, PolicyParams, SequenceLoss};
pub use trainer::{train_loop, TrainConfig, Trainer};
pub use trajectory::{RolloutGroup, Segment, SegmentKind, TerminalReason, Trajectory};
pub use vocab::{Roles, TokenId, Vocab};
