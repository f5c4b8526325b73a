//! Structural causal models with non-backtracking and natural counterfactuals.
//!
//! A natural counterfactual realizes `change(A = a*)` by the least-backtracking
//! feasible intervention: the target is always set, and its ancestors are moved
//! only as far as needed for every variable of `AN(A)` to stay ε-natural under
//! its local mechanism.

pub mod bench;
pub mod dataset;
pub mod distance;
pub mod engine;
pub mod estimator;
pub mod fio;
pub mod graph;
pub mod mechanism;
pub mod naturalness;
pub mod noise;
pub mod oracle;
pub mod scm;
pub mod toys;

pub use dataset::{Dataset, DatasetError};
pub use distance::{DistanceKind, StandardizationStats};
pub use engine::{natural_cf, nonbacktracking_cf, CounterfactualAnswer, CounterfactualKind};
pub use estimator::{column_stats, fit_location_scale, FitConfig};
pub use fio::{solve, ChangeRequest, FioConfig, FioResult, FioStatus};
pub use graph::{CausalGraph, GraphError, VariableId};
pub use mechanism::{parse_mechanism, Mechanism, MechanismError};
pub use naturalness::NaturalnessMeasure;
pub use noise::NoiseDistribution;
pub use scm::{Assignment, Intervention, NodeMechanism, NoiseAssignment, Scm, ScmError};
