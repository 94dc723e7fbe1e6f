//! Double machine learning estimators of average treatment effects when
//! outcomes are observed only for a selected subsample.
//!
//! Three identification strategies are supported: outcomes missing at random
//! given treatment and covariates, nonignorable selection with an instrument
//! (control-function approach, for the total or the selected population), and
//! selection driven by post-treatment covariates (sequential conditioning).
//! Nuisance functions are fitted by L1-penalized learners with K-fold
//! cross-fitting; scores are trimmed on the estimated weight denominators.

pub mod cli;
pub mod crossfit;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod learners;
pub mod scores;
pub mod simulation;
pub mod stats;

pub use crossfit::{make_folds, FoldPlan, LevelPredictions, NuisancePredictions, NuisanceSpecs};
pub use dataset::{load_csv, standardize, ColumnSchema, SelectionDataset};
pub use error::{Error, Result};
pub use estimator::{estimate_ate, estimate_potential_outcome, EffectEstimate, EstimateConfig};
pub use learners::{Family, FittedModel, LearnerSpec, Regularization};
pub use scores::{EstimatorKind, ScoreVector};
