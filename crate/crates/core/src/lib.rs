//! Model-robust standardized treatment-effect estimation for stepped-wedge
//! cluster-randomized trials.
//!
//! The crate covers the full analysis pipeline:
//!
//! - [`data`]: long-format dataset ingestion, validation, and the design
//!   layout (adoption times, propensities, cell sizes);
//! - [`weights`]: the four estimand weight schemes (h-iATE, h-cATE, v-iATE,
//!   v-cATE);
//! - [`estimator`]: the unadjusted nonparametric moment estimator;
//! - [`models`]: working outcome regressions (independence GEE, linear mixed
//!   models by REML, logistic mixed models by Laplace approximation, and
//!   weighted-least-squares ANCOVA) together with cluster-period mean
//!   predictions for both arms;
//! - [`standardize`]: the augmented (model-robust standardization)
//!   estimator combining weights, observed cell means, and predictions;
//! - [`inference`]: leave-one-cluster-out jackknife variance, t-based
//!   intervals, and the informative-cluster-size tests;
//! - [`sim`]: scenario generators and the Monte Carlo evaluation harness.

pub mod contrast;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod models;
pub mod sim;
pub mod standardize;
pub mod weights;

pub use contrast::{apply_contrast, ContrastScale, PsiTransform, ScaleKind};
pub use data::{
    cluster_period_summary, derive_layout, load_trial_csv, CellSummary, ClusterSubset,
    ColumnSchema, DesignLayout, IndividualRecord, TrialDataset,
};
pub use error::{Error, Result};
pub use estimator::{unadjusted_mu, unadjusted_tau};
pub use inference::{
    global_ics_test, jackknife, pairwise_ics_test, EstimateResult, IcsPair, IcsTestResult,
    LocoPolicy, Method,
};
pub use models::{
    fit_ancova_wls, fit_gee_independence, fit_glmm_laplace, fit_lmm, fit_working_model,
    FittedModel, ModelFrame, PredictionSet, WorkingModelSpec,
};
pub use standardize::{mrs_mu, mrs_mu_period, mrs_tau, PeriodAugmentedEstimate};
pub use sim::{
    generate_trial, run_monte_carlo, true_estimands, MethodSpec, MetricsTable, Scenario,
    ScenarioConfig, SimulatedTrial, TruthEstimands,
};
pub use weights::{resolve_weights, SchemeKind, WeightScheme};
