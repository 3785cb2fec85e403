//! Working outcome regressions and cluster-period mean predictions.
//!
//! A working model's only job in the standardization pipeline is to produce
//! predictions m_zj of the cluster-period mean outcome for both arms on
//! every rollout period; consistency of the augmented estimator does not
//! depend on the model being correct, only efficiency does. Four estimators
//! are available:
//!
//! - [`fit_gee_independence`]: independence estimating equations via IRLS
//!   (exactly OLS for gaussian/identity);
//! - [`fit_lmm`]: gaussian linear mixed model with cluster and optional
//!   cluster-period random intercepts, by profiled REML;
//! - [`fit_glmm_laplace`]: binomial mixed model by Laplace-approximate
//!   maximum likelihood;
//! - [`fit_ancova_wls`]: weighted least squares with period-mean-centered
//!   covariates and estimand-specific weights.

mod ancova;
mod design;
mod family;
mod gee;
mod glmm;
mod lmm;
pub(crate) mod optim;

pub use ancova::fit_ancova_wls;
pub use design::{CellStats, ColumnRole, ModelFrame};
pub use family::{expit, Family, Link};
pub use gee::fit_gee_independence_on;
pub use glmm::fit_glmm_laplace_on;
pub use lmm::{fit_lmm_on, reml_deviance};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};
use crate::weights::WeightScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentEffect {
    Constant,
    PeriodSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffects {
    None,
    Cluster,
    ClusterPlusClusterPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorKind {
    GeeIndependence,
    LmmReml,
    GlmmLaplace,
    AncovaWls,
}

/// One covariate term; the token `cell_size` injects N_ij.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CovariateTerm {
    Named(String),
    CellSize,
}

impl CovariateTerm {
    pub fn parse(s: &str) -> CovariateTerm {
        if s == "cell_size" {
            CovariateTerm::CellSize
        } else {
            CovariateTerm::Named(s.to_string())
        }
    }

    pub fn name(&self) -> &str {
        match self {
            CovariateTerm::Named(n) => n,
            CovariateTerm::CellSize => "cell_size",
        }
    }
}

impl Serialize for CovariateTerm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CovariateTerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(CovariateTerm::parse(&String::deserialize(d)?))
    }
}

/// Declarative description of a working outcome regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingModelSpec {
    #[serde(default = "default_family")]
    pub family: Family,
    #[serde(default = "default_link")]
    pub link: Link,
    #[serde(default = "default_treatment_effect")]
    pub treatment_effect: TreatmentEffect,
    #[serde(default = "default_random_effects")]
    pub random_effects: RandomEffects,
    #[serde(default)]
    pub covariates: Vec<CovariateTerm>,
    pub estimator: EstimatorKind,
    /// Adds treatment-by-covariate interactions to the ANCOVA design
    /// (the "ANCOVA-III" variant); main-effects-only otherwise.
    #[serde(default)]
    pub ancova_interactions: bool,
}

fn default_family() -> Family {
    Family::Gaussian
}
fn default_link() -> Link {
    Link::Identity
}
fn default_treatment_effect() -> TreatmentEffect {
    TreatmentEffect::Constant
}
fn default_random_effects() -> RandomEffects {
    RandomEffects::None
}

impl WorkingModelSpec {
    /// Fill family/link defaults implied by the estimator, then validate.
    pub fn normalized(mut self) -> Result<Self> {
        if self.estimator == EstimatorKind::GlmmLaplace && self.family == Family::Gaussian {
            self.family = Family::Binomial;
            if self.link == Link::Identity {
                self.link = Link::Logit;
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        match self.estimator {
            EstimatorKind::LmmReml => {
                if self.family != Family::Gaussian || self.link != Link::Identity {
                    return err("LMM_REML requires gaussian family with identity link");
                }
                if self.random_effects == RandomEffects::None {
                    return err("LMM_REML requires cluster or cluster_plus_cluster_period random effects");
                }
            }
            EstimatorKind::GlmmLaplace => {
                if self.family != Family::Binomial
                    || !matches!(self.link, Link::Logit | Link::Log)
                {
                    return err("GLMM_LAPLACE requires binomial family with logit or log link");
                }
                if self.random_effects == RandomEffects::None {
                    return err("GLMM_LAPLACE requires cluster or cluster_plus_cluster_period random effects");
                }
            }
            EstimatorKind::GeeIndependence | EstimatorKind::AncovaWls => {
                if self.random_effects != RandomEffects::None {
                    return err("independence estimators take random_effects = none");
                }
                if self.estimator == EstimatorKind::AncovaWls && self.link != Link::Identity {
                    return err("ANCOVA_WLS requires the identity link");
                }
            }
        }
        if self.ancova_interactions && self.estimator != EstimatorKind::AncovaWls {
            return err("ancova_interactions only applies to ANCOVA_WLS");
        }
        Ok(())
    }

    /// The working models used in the scenario studies. W1-W6 are gaussian
    /// (identity link) and W7-W12 binomial (logit), all adjusting for the
    /// simulator's covariates x1, x2 and the cell size.
    pub fn preset(name: &str) -> Option<WorkingModelSpec> {
        let covs = vec![
            CovariateTerm::Named("x1".into()),
            CovariateTerm::Named("x2".into()),
            CovariateTerm::CellSize,
        ];
        let (estimator, family, link, te, re) = match name.to_ascii_uppercase().as_str() {
            "W1" => (EstimatorKind::GeeIndependence, Family::Gaussian, Link::Identity, TreatmentEffect::Constant, RandomEffects::None),
            "W2" => (EstimatorKind::GeeIndependence, Family::Gaussian, Link::Identity, TreatmentEffect::PeriodSpecific, RandomEffects::None),
            "W3" => (EstimatorKind::LmmReml, Family::Gaussian, Link::Identity, TreatmentEffect::Constant, RandomEffects::Cluster),
            "W4" => (EstimatorKind::LmmReml, Family::Gaussian, Link::Identity, TreatmentEffect::PeriodSpecific, RandomEffects::Cluster),
            "W5" => (EstimatorKind::LmmReml, Family::Gaussian, Link::Identity, TreatmentEffect::Constant, RandomEffects::ClusterPlusClusterPeriod),
            "W6" => (EstimatorKind::LmmReml, Family::Gaussian, Link::Identity, TreatmentEffect::PeriodSpecific, RandomEffects::ClusterPlusClusterPeriod),
            "W7" => (EstimatorKind::GeeIndependence, Family::Binomial, Link::Logit, TreatmentEffect::Constant, RandomEffects::None),
            "W8" => (EstimatorKind::GeeIndependence, Family::Binomial, Link::Logit, TreatmentEffect::PeriodSpecific, RandomEffects::None),
            "W9" => (EstimatorKind::GlmmLaplace, Family::Binomial, Link::Logit, TreatmentEffect::Constant, RandomEffects::Cluster),
            "W10" => (EstimatorKind::GlmmLaplace, Family::Binomial, Link::Logit, TreatmentEffect::PeriodSpecific, RandomEffects::Cluster),
            "W11" => (EstimatorKind::GlmmLaplace, Family::Binomial, Link::Logit, TreatmentEffect::Constant, RandomEffects::ClusterPlusClusterPeriod),
            "W12" => (EstimatorKind::GlmmLaplace, Family::Binomial, Link::Logit, TreatmentEffect::PeriodSpecific, RandomEffects::ClusterPlusClusterPeriod),
            _ => return None,
        };
        Some(WorkingModelSpec {
            family,
            link,
            treatment_effect: te,
            random_effects: re,
            covariates: covs,
            estimator,
            ancova_interactions: false,
        })
    }

    /// A covariate-free version (predictions constant across clusters, under
    /// which the augmented estimator reduces to the unadjusted one).
    pub fn without_covariates(mut self) -> Self {
        self.covariates.clear();
        self
    }
}

/// Estimated variance components; zero where a component is not in the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// τ_α²: between-cluster variance.
    pub cluster: f64,
    /// τ_γ²: cluster-period interaction variance.
    pub cell: f64,
    /// σ_ε²: residual variance (gaussian only).
    pub residual: f64,
}

impl VarianceComponents {
    pub fn none() -> Self {
        VarianceComponents {
            cluster: 0.0,
            cell: 0.0,
            residual: 0.0,
        }
    }

    pub fn total_random(&self) -> f64 {
        self.cluster + self.cell
    }
}

/// Optimizer bookkeeping attached to every fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Some variance component ended at (numerically) zero.
    pub boundary: bool,
    /// Monotone sequence of accepted objective values.
    #[serde(skip)]
    pub accepted_objectives: Vec<f64>,
}

impl Convergence {
    pub fn exact() -> Self {
        Convergence {
            iterations: 1,
            objective: 0.0,
            grad_norm: 0.0,
            converged: true,
            boundary: false,
            accepted_objectives: Vec::new(),
        }
    }
}

/// Per-period covariate centering used by the ANCOVA fit, kept so that
/// predictions can reproduce the centered design.
#[derive(Debug, Clone)]
pub struct AncovaCentering {
    /// Row-major J x m matrix of ω-weighted period means of each covariate.
    pub period_means: Vec<f64>,
    pub n_covariates: usize,
}

impl AncovaCentering {
    pub fn mean(&self, period: usize, cov: usize) -> f64 {
        self.period_means[(period - 1) * self.n_covariates + cov]
    }
}

/// A fitted working model, able to predict cluster-period means for both
/// arms on any rollout period.
pub struct FittedModel {
    pub spec: WorkingModelSpec,
    /// Reported coefficients `[β_1..β_J | τ or τ_2..τ_J | γ ... ]` with
    /// aliased treatment slots fixed at zero.
    pub coef: DVector<f64>,
    pub vc: VarianceComponents,
    pub convergence: Convergence,
    pub(crate) frame: std::sync::Arc<ModelFrame>,
    pub(crate) active_coef: DVector<f64>,
    pub(crate) centering: Option<AncovaCentering>,
    /// Model-based covariance of the active fixed effects (GLMM only).
    pub(crate) beta_cov: Option<DMatrix<f64>>,
}

impl FittedModel {
    pub fn n_periods(&self) -> usize {
        self.frame.n_periods
    }

    /// Treatment coefficient: the single τ under a constant effect.
    pub fn tau_constant(&self) -> Option<f64> {
        match self.spec.treatment_effect {
            TreatmentEffect::Constant => Some(self.coef[self.frame.n_periods]),
            TreatmentEffect::PeriodSpecific => None,
        }
    }

    /// τ_j for period j (2..=J); zero for aliased periods.
    pub fn tau_period(&self, j: usize) -> f64 {
        match self.spec.treatment_effect {
            TreatmentEffect::Constant => self.coef[self.frame.n_periods],
            TreatmentEffect::PeriodSpecific => self.coef[self.frame.n_periods + (j - 2)],
        }
    }

    /// Model-based SE of the treatment coefficient (GLMM fits only).
    pub fn tau_model_se(&self) -> Option<f64> {
        let cov = self.beta_cov.as_ref()?;
        let idx = self
            .frame
            .roles
            .iter()
            .position(|r| matches!(r, ColumnRole::Treat))?;
        Some(cov[(idx, idx)].sqrt())
    }

    /// Model-based SE of the ω_j-pooled treatment coefficient
    /// Σ_j w_j τ̂_j / Σ_j w_j over rollout periods (GLMM fits only).
    pub fn pooled_tau_model_se(&self, weights: &[(usize, f64)]) -> Option<f64> {
        let cov = self.beta_cov.as_ref()?;
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        let mut a = DVector::zeros(self.frame.p());
        for &(j, w) in weights {
            match self.spec.treatment_effect {
                TreatmentEffect::Constant => {
                    let idx = self
                        .frame
                        .roles
                        .iter()
                        .position(|r| matches!(r, ColumnRole::Treat))?;
                    a[idx] += w / total;
                }
                TreatmentEffect::PeriodSpecific => {
                    let idx = self
                        .frame
                        .roles
                        .iter()
                        .position(|r| matches!(r, ColumnRole::TreatPeriod(pj) if *pj == j))?;
                    a[idx] += w / total;
                }
            }
        }
        Some((a.transpose() * cov * &a)[(0, 0)].max(0.0).sqrt())
    }

    /// Predict m_zj for every cluster at rollout period j under arm z.
    ///
    /// Entries are NaN for clusters with an empty cell when the model has
    /// covariate terms (there is nothing to average); covariate-free models
    /// predict a constant for every cluster.
    pub fn predict_m(&self, data: &TrialDataset, z: u8, period: usize) -> Result<Vec<f64>> {
        if !(2..data.n_periods()).contains(&period) {
            return Err(Error::PeriodOutOfRange(period));
        }
        let frame = &self.frame;
        let n_j = frame.n_periods;
        let base = self.coef[period - 1]
            + if z == 1 {
                match self.spec.treatment_effect {
                    TreatmentEffect::Constant => self.coef[n_j],
                    TreatmentEffect::PeriodSpecific => self.coef[n_j + (period - 2)],
                }
            } else {
                0.0
            };
        let m = frame.cov_sources.len();
        let t_slots = match self.spec.treatment_effect {
            TreatmentEffect::Constant => 1,
            TreatmentEffect::PeriodSpecific => n_j - 1,
        };
        let gamma = self.coef.rows(n_j + t_slots, m).into_owned();
        let xi = if self.spec.ancova_interactions {
            Some(self.coef.rows(n_j + t_slots + m, m).into_owned())
        } else {
            None
        };

        // Marginalization of the random effects on the link scale.
        let transform = |theta: f64| -> f64 {
            match (self.spec.estimator, self.spec.link) {
                (EstimatorKind::GlmmLaplace, Link::Logit) => {
                    let scale =
                        ((self.vc.total_random() + PI2_OVER_3) / PI2_OVER_3).sqrt();
                    expit(theta / scale)
                }
                (EstimatorKind::GlmmLaplace, Link::Log) => {
                    (theta + 0.5 * self.vc.total_random()).exp()
                }
                (_, link) => link.inv(theta),
            }
        };

        let mut out = vec![f64::NAN; data.n_clusters()];
        for i in 0..data.n_clusters() {
            let range = data.cell_range(i, period);
            if range.is_empty() {
                if m == 0 {
                    out[i] = transform(base);
                }
                continue;
            }
            let n_ij = range.len() as f64;
            let mut acc = 0.0;
            for r in range {
                let rec = &data.rows()[r];
                let mut theta = base;
                for (k, src) in frame.cov_sources.iter().enumerate() {
                    let raw = match src {
                        design::CovSource::Column(ci) => rec.covariates[*ci],
                        design::CovSource::CellSize => n_ij,
                    };
                    let v = match &self.centering {
                        Some(c) => raw - c.mean(period, k),
                        None => raw,
                    };
                    theta += gamma[k] * v;
                    if let Some(xi) = &xi {
                        if z == 1 {
                            theta += xi[k] * v;
                        }
                    }
                }
                acc += transform(theta);
            }
            out[i] = acc / n_ij;
        }
        Ok(out)
    }
}

pub(crate) const PI2_OVER_3: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

/// Predictions for both arms on every rollout period, computed once and
/// reused by the standardization step.
pub struct PredictionSet {
    /// m[z] is a row-major I x J matrix (period index j-1); NaN where
    /// undefined.
    m: [Vec<f64>; 2],
    n_periods: usize,
}

impl PredictionSet {
    pub fn compute(model: &FittedModel, data: &TrialDataset) -> Result<PredictionSet> {
        let n_j = data.n_periods();
        let n_i = data.n_clusters();
        let mut m = [vec![f64::NAN; n_i * n_j], vec![f64::NAN; n_i * n_j]];
        for j in data.rollout_periods() {
            for z in [0u8, 1u8] {
                let preds = model.predict_m(data, z, j)?;
                for i in 0..n_i {
                    m[z as usize][i * n_j + (j - 1)] = preds[i];
                }
            }
        }
        Ok(PredictionSet { m, n_periods: n_j })
    }

    /// Build directly from per-arm I x J matrices (used by tests and the
    /// brute-force oracles).
    pub fn from_values(m0: Vec<f64>, m1: Vec<f64>, n_periods: usize) -> PredictionSet {
        PredictionSet {
            m: [m0, m1],
            n_periods,
        }
    }

    #[inline]
    pub fn get(&self, z: u8, cluster: usize, period: usize) -> f64 {
        self.m[z as usize][cluster * self.n_periods + (period - 1)]
    }
}

/// Fit the model described by `spec` on the full dataset.
pub fn fit_working_model(
    data: &TrialDataset,
    spec: &WorkingModelSpec,
    scheme: Option<&WeightScheme>,
) -> Result<FittedModel> {
    let frame = std::sync::Arc::new(ModelFrame::new(data, spec)?);
    fit_prepared(data, &frame, &ClusterSubset::full(data.n_clusters()), scheme)
}

/// Fit a prepared frame over a cluster subset; `scheme` is required for
/// ANCOVA (its weights and centering are estimand-specific).
pub fn fit_prepared(
    data: &TrialDataset,
    frame: &std::sync::Arc<ModelFrame>,
    subset: &ClusterSubset,
    scheme: Option<&WeightScheme>,
) -> Result<FittedModel> {
    match frame.spec.estimator {
        EstimatorKind::GeeIndependence => fit_gee_independence_on(frame, subset),
        EstimatorKind::LmmReml => fit_lmm_on(frame, subset),
        EstimatorKind::GlmmLaplace => fit_glmm_laplace_on(data, frame, subset),
        EstimatorKind::AncovaWls => {
            let scheme = scheme.ok_or_else(|| {
                Error::InvalidSpec("ANCOVA_WLS requires a weight scheme".into())
            })?;
            fit_ancova_wls(data, frame, subset, scheme)
        }
    }
}

/// Convenience wrappers matching the per-estimator operation names.
pub fn fit_lmm(data: &TrialDataset, spec: &WorkingModelSpec) -> Result<FittedModel> {
    let frame = std::sync::Arc::new(ModelFrame::new(data, spec)?);
    fit_lmm_on(&frame, &ClusterSubset::full(data.n_clusters()))
}

pub fn fit_gee_independence(data: &TrialDataset, spec: &WorkingModelSpec) -> Result<FittedModel> {
    let frame = std::sync::Arc::new(ModelFrame::new(data, spec)?);
    fit_gee_independence_on(&frame, &ClusterSubset::full(data.n_clusters()))
}

pub fn fit_glmm_laplace(data: &TrialDataset, spec: &WorkingModelSpec) -> Result<FittedModel> {
    let frame = std::sync::Arc::new(ModelFrame::new(data, spec)?);
    fit_glmm_laplace_on(data, &frame, &ClusterSubset::full(data.n_clusters()))
}
