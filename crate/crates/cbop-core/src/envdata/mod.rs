//! Environments, scripted behavior policies, and offline datasets.

pub mod behavior;
pub mod dataset;
pub mod env;
pub mod format;

pub use behavior::{controller_action, measure_controller_return, BehaviorTag, Quality};
pub use dataset::{compute_stats, generate_dataset, Dataset, GenConfig, NormStats, Transition};
pub use env::{EnvKind, EnvSpec, DT};
pub use format::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset};
