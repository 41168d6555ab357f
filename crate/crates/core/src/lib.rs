//! Model-based clustering with simultaneous variable selection.
//!
//! Observations are modelled by a diagonal Gaussian mixture in which each
//! variable is either relevant (its distribution differs across components)
//! or irrelevant (shared across components). Models are compared through the
//! maximum over partitions of the integrated complete-data likelihood, which
//! has a closed form under conjugate priors and is optimized by alternating
//! single-observation reassignments with coordinate-wise relevance updates.
//! Parameters are only estimated, by EM, for the selected model.

pub mod criteria;
pub mod data;
pub mod error;
pub mod estimation;
pub mod likelihood;
pub mod model;
pub mod rng;
pub mod search;
pub mod simulation;

pub use criteria::{Criterion, CriterionContext, CriterionRegistry};
pub use data::{load_data, load_labeled, DataMatrix, ParseOptions};
pub use error::{Error, Result};
pub use estimation::{fit_em, EmConfig, EmMode, FitResult};
pub use likelihood::{log_integrated_complete, CriterionKind, LogCriterion, SuffStats};
pub use model::{free_param_count, Hyperparams, MixtureParams, ModelSpec, Partition};
pub use search::{select_model, SearchConfig, SearchResult};
