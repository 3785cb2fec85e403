//! Leave-one-cluster-out jackknife inference and the informative-
//! cluster-size tests.
//!
//! Every replicate drops one cluster entirely: weights (including the
//! v-iATE plug-in period means) are recomputed on the reduced sample and
//! the working model is refitted, so predictions never leak information
//! from the left-out cluster. The variance estimator is centered at the
//! replicate mean with the (I−1)/I factor; intervals use t(I−1).

pub mod special;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

use crate::contrast::{apply_contrast, ContrastScale};
use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};
use crate::estimator::unadjusted_mu_on;
use crate::models::{
    fit_prepared, EstimatorKind, FittedModel, ModelFrame, PredictionSet, TreatmentEffect,
    WorkingModelSpec,
};
use crate::standardize::mrs_mu_pooled;
use crate::weights::{resolve_weights_on, SchemeKind};
use special::{f_upper_p, t_quantile, t_two_sided_p};

/// How a point estimate is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// The nonparametric moment estimator.
    Unadjusted,
    /// Model-robust standardization with the given working model.
    Mrs(WorkingModelSpec),
    /// The working model's treatment coefficient (ω_j-pooled when
    /// period-specific). Reported on the linear-predictor scale.
    Coef(WorkingModelSpec),
}

impl Method {
    pub fn spec(&self) -> Option<&WorkingModelSpec> {
        match self {
            Method::Unadjusted => None,
            Method::Mrs(s) | Method::Coef(s) => Some(s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Unadjusted => "unadj".into(),
            Method::Mrs(_) => "mrs".into(),
            Method::Coef(_) => "coef".into(),
        }
    }
}

/// What to do when leaving a cluster out empties an arm in some period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocoPolicy {
    /// Abort the whole analysis (default).
    Error,
    /// Drop the offending period from that replicate's pooling.
    DropPeriod,
    /// Drop the replicate entirely (reduces the jackknife df).
    DropReplicate,
}

impl LocoPolicy {
    pub fn parse(s: &str) -> Option<LocoPolicy> {
        match s {
            "error" => Some(LocoPolicy::Error),
            "drop-period" => Some(LocoPolicy::DropPeriod),
            "drop-replicate" => Some(LocoPolicy::DropReplicate),
            _ => None,
        }
    }
}

/// A point estimate on both the contrast and the ψ reporting scale.
#[derive(Debug, Clone, Copy)]
pub struct PointValue {
    pub mu: Option<(f64, f64)>,
    pub tau: f64,
    pub psi_tau: f64,
}

/// A model fitted on one cluster subset, shared across estimands. For
/// non-ANCOVA working models the fit (and its predictions) do not depend on
/// the weight scheme, so all four estimands reuse them; ANCOVA refits per
/// scheme because its weights and centering are estimand-specific.
pub(crate) struct SubsetFit {
    fit: Option<FittedModel>,
    preds: Option<PredictionSet>,
}

pub(crate) fn prepare_subset(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    subset: &ClusterSubset,
) -> Result<SubsetFit> {
    match method {
        Method::Unadjusted => Ok(SubsetFit {
            fit: None,
            preds: None,
        }),
        Method::Mrs(spec) | Method::Coef(spec) => {
            if spec.estimator == EstimatorKind::AncovaWls {
                // deferred to the per-scheme step
                return Ok(SubsetFit {
                    fit: None,
                    preds: None,
                });
            }
            let frame = frame.expect("model method requires a prepared frame");
            let fit = fit_prepared(data, frame, subset, None)?;
            let preds = if matches!(method, Method::Mrs(_)) {
                Some(PredictionSet::compute(&fit, data)?)
            } else {
                None
            };
            Ok(SubsetFit {
                fit: Some(fit),
                preds,
            })
        }
    }
}

/// One method's point estimate for one estimand on a prepared subset.
///
/// `periods` restricts the pooled rollout periods (used by the drop-period
/// policy); pass the full rollout range otherwise.
pub(crate) fn value_for_scheme(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    prepared: &SubsetFit,
    kind: SchemeKind,
    subset: &ClusterSubset,
    scale: ContrastScale,
    periods: &[usize],
) -> Result<PointValue> {
    let scheme = resolve_weights_on(data, kind, subset)?;
    match method {
        Method::Unadjusted => {
            let mu1 = unadjusted_mu_restricted(data, &scheme, subset, 1, periods)?;
            let mu0 = unadjusted_mu_restricted(data, &scheme, subset, 0, periods)?;
            let tau = apply_contrast(scale, mu1, mu0)?;
            Ok(PointValue {
                mu: Some((mu1, mu0)),
                tau,
                psi_tau: scale.psi(tau),
            })
        }
        Method::Mrs(spec) => {
            let ancova;
            let preds = if spec.estimator == EstimatorKind::AncovaWls {
                let frame = frame.expect("Mrs method requires a prepared frame");
                let fit = fit_prepared(data, frame, subset, Some(&scheme))?;
                ancova = PredictionSet::compute(&fit, data)?;
                &ancova
            } else {
                prepared.preds.as_ref().expect("prepared predictions")
            };
            let mu1 = mrs_mu_restricted(data, &scheme, preds, subset, 1, periods)?;
            let mu0 = mrs_mu_restricted(data, &scheme, preds, subset, 0, periods)?;
            let tau = apply_contrast(scale, mu1, mu0)?;
            Ok(PointValue {
                mu: Some((mu1, mu0)),
                tau,
                psi_tau: scale.psi(tau),
            })
        }
        Method::Coef(spec) => {
            let ancova;
            let fit = if spec.estimator == EstimatorKind::AncovaWls {
                let frame = frame.expect("Coef method requires a prepared frame");
                ancova = fit_prepared(data, frame, subset, Some(&scheme))?;
                &ancova
            } else {
                prepared.fit.as_ref().expect("prepared fit")
            };
            let psi_tau = pooled_coef(fit, data, subset, kind, periods)?;
            Ok(PointValue {
                mu: None,
                tau: scale.psi_inv(psi_tau),
                psi_tau,
            })
        }
    }
}

/// Compute one method's point estimate on a cluster subset.
pub(crate) fn point_estimate_on(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    kind: SchemeKind,
    subset: &ClusterSubset,
    scale: ContrastScale,
    periods: &[usize],
) -> Result<PointValue> {
    let prepared = prepare_subset(data, frame, method, subset)?;
    value_for_scheme(data, frame, method, &prepared, kind, subset, scale, periods)
}

/// ω_j-pooled treatment coefficient over the given rollout periods.
pub(crate) fn pooled_coef(
    fit: &FittedModel,
    data: &TrialDataset,
    subset: &ClusterSubset,
    kind: SchemeKind,
    periods: &[usize],
) -> Result<f64> {
    match fit.spec.treatment_effect {
        TreatmentEffect::Constant => Ok(fit.coef[data.n_periods()]),
        TreatmentEffect::PeriodSpecific => {
            let scheme = resolve_weights_on(data, kind, subset)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for &j in periods {
                let w: f64 = subset.iter().map(|i| scheme.cell(i, j)).sum();
                num += w * fit.tau_period(j);
                den += w;
            }
            Ok(num / den)
        }
    }
}

fn unadjusted_mu_restricted(
    data: &TrialDataset,
    scheme: &crate::weights::WeightScheme,
    subset: &ClusterSubset,
    z: u8,
    periods: &[usize],
) -> Result<f64> {
    if periods.len() == data.rollout_periods().len() {
        return unadjusted_mu_on(data, scheme, subset, z);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &j in periods {
        let w_j: f64 = subset.iter().map(|i| scheme.cell(i, j)).sum();
        num += w_j * crate::estimator::arm_period_mean(data, scheme, subset, z, j)?;
        den += w_j;
    }
    if den <= 0.0 {
        return Err(Error::NoRolloutPeriod {
            period: data.n_periods(),
            propensity: f64::NAN,
        });
    }
    Ok(num / den)
}

fn mrs_mu_restricted(
    data: &TrialDataset,
    scheme: &crate::weights::WeightScheme,
    preds: &PredictionSet,
    subset: &ClusterSubset,
    z: u8,
    periods: &[usize],
) -> Result<f64> {
    if periods.len() == data.rollout_periods().len() {
        return mrs_mu_pooled(data, scheme, preds, subset, z);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &j in periods {
        let w_j: f64 = subset.iter().map(|i| scheme.cell(i, j)).sum();
        let est = crate::standardize::mrs_mu_period(data, scheme, preds, subset, z, j)?;
        num += w_j * est.value;
        den += w_j;
    }
    if den <= 0.0 {
        return Err(Error::NoRolloutPeriod {
            period: data.n_periods(),
            propensity: f64::NAN,
        });
    }
    Ok(num / den)
}

/// The leave-one-cluster-out replicates of one method/estimand.
#[derive(Debug, Clone)]
pub struct JackknifeReplicates {
    /// (left-out cluster, replicate value) — ψ-scale τ.
    pub psi_tau: Vec<(usize, f64)>,
    /// μ-pair replicates when the method produces them.
    pub mu: Option<Vec<(usize, (f64, f64))>>,
    /// Periods dropped per replicate under the drop-period policy.
    pub dropped_periods: Vec<(usize, Vec<usize>)>,
}

/// Point estimate, jackknife SE, and t-based CI for one estimand.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub estimand: SchemeKind,
    pub scale: ContrastScale,
    pub method: String,
    /// Point estimate on the contrast scale f(μ1, μ0).
    pub point: f64,
    /// ψ(point): the scale on which the SE and CI are computed.
    pub psi_point: f64,
    pub se_psi: f64,
    /// CI on the contrast scale (back-transformed from ψ).
    pub ci: (f64, f64),
    pub ci_psi: (f64, f64),
    pub df: usize,
    /// Jackknife covariance of (μ̂(1), μ̂(0)) when available.
    pub sigma_mu: Option<[[f64; 2]; 2]>,
    pub mu1: Option<f64>,
    pub mu0: Option<f64>,
    pub n_replicates: usize,
}

/// Jackknife variance of scalar replicates: ((n−1)/n) Σ (v − v̄)².
pub fn jackknife_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * (n - 1.0) / n
}

/// Run the LOCO loop for one method/estimand, applying the policy.
fn loco_replicates(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    kind: SchemeKind,
    scale: ContrastScale,
    policy: LocoPolicy,
) -> Result<JackknifeReplicates> {
    let n_i = data.n_clusters();
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let results: Vec<(usize, Result<Option<(PointValue, Vec<usize>)>>)> = (0..n_i)
        .into_par_iter()
        .map(|g| {
            let subset = ClusterSubset::leave_out(n_i, g);
            let mut periods = all_periods.clone();
            let mut dropped = Vec::new();
            loop {
                match point_estimate_on(data, frame, method, kind, &subset, scale, &periods) {
                    Ok(v) => return (g, Ok(Some((v, dropped)))),
                    Err(Error::EmptyArmInPeriod { period, arm }) => match policy {
                        LocoPolicy::Error => {
                            return (
                                g,
                                Err(Error::LocoDegenerate {
                                    cluster: data.cluster_labels()[g].clone(),
                                    period,
                                    arm,
                                }),
                            )
                        }
                        LocoPolicy::DropPeriod => {
                            periods.retain(|&j| j != period);
                            dropped.push(period);
                            if periods.is_empty() {
                                return (
                                    g,
                                    Err(Error::LocoDegenerate {
                                        cluster: data.cluster_labels()[g].clone(),
                                        period,
                                        arm,
                                    }),
                                );
                            }
                        }
                        LocoPolicy::DropReplicate => return (g, Ok(None)),
                    },
                    Err(e) => return (g, Err(e)),
                }
            }
        })
        .collect();

    let mut psi = Vec::with_capacity(n_i);
    let mut mu = Vec::with_capacity(n_i);
    let mut has_mu = true;
    let mut dropped_periods = Vec::new();
    for (g, r) in results {
        match r? {
            None => continue,
            Some((v, dropped)) => {
                psi.push((g, v.psi_tau));
                match v.mu {
                    Some(pair) => mu.push((g, pair)),
                    None => has_mu = false,
                }
                if !dropped.is_empty() {
                    dropped_periods.push((g, dropped));
                }
            }
        }
    }
    if psi.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "only {} usable jackknife replicates",
            psi.len()
        )));
    }
    Ok(JackknifeReplicates {
        psi_tau: psi,
        mu: if has_mu { Some(mu) } else { None },
        dropped_periods,
    })
}

/// Full jackknife analysis of one method under one estimand and scale.
pub fn jackknife(
    data: &TrialDataset,
    method: &Method,
    kind: SchemeKind,
    scale: ContrastScale,
    policy: LocoPolicy,
) -> Result<EstimateResult> {
    if data.n_clusters() < 3 {
        return Err(Error::InvalidConfig(
            "jackknife requires at least 3 clusters".into(),
        ));
    }
    let frame = match method.spec() {
        Some(spec) => Some(Arc::new(ModelFrame::new(data, spec)?)),
        None => None,
    };
    let full_subset = ClusterSubset::full(data.n_clusters());
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let full = point_estimate_on(
        data,
        frame.as_ref(),
        method,
        kind,
        &full_subset,
        scale,
        &all_periods,
    )?;
    let reps = loco_replicates(data, frame.as_ref(), method, kind, scale, policy)?;
    Ok(summarize(method, kind, scale, full, &reps))
}

pub(crate) fn summarize(
    method: &Method,
    kind: SchemeKind,
    scale: ContrastScale,
    full: PointValue,
    reps: &JackknifeReplicates,
) -> EstimateResult {
    let psi_values: Vec<f64> = reps.psi_tau.iter().map(|&(_, v)| v).collect();
    let n = psi_values.len();
    let se_psi = jackknife_variance(&psi_values).sqrt();
    let df = n - 1;
    let t = t_quantile(0.975, df as f64);
    let ci_psi = (full.psi_tau - t * se_psi, full.psi_tau + t * se_psi);
    let ci = (scale.psi_inv(ci_psi.0), scale.psi_inv(ci_psi.1));
    let sigma_mu = reps.mu.as_ref().map(|pairs| {
        let m1 = pairs.iter().map(|&(_, (a, _))| a).sum::<f64>() / n as f64;
        let m0 = pairs.iter().map(|&(_, (_, b))| b).sum::<f64>() / n as f64;
        let mut s = [[0.0; 2]; 2];
        for &(_, (a, b)) in pairs {
            let (da, db) = (a - m1, b - m0);
            s[0][0] += da * da;
            s[0][1] += da * db;
            s[1][1] += db * db;
        }
        let factor = (n as f64 - 1.0) / n as f64;
        s[1][0] = s[0][1];
        for row in &mut s {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        s
    });
    EstimateResult {
        estimand: kind,
        scale,
        method: method.label(),
        point: full.tau,
        psi_point: full.psi_tau,
        se_psi,
        ci,
        ci_psi,
        df,
        sigma_mu,
        mu1: full.mu.map(|(a, _)| a),
        mu0: full.mu.map(|(_, b)| b),
        n_replicates: n,
    }
}

/// Which pairwise informative-size test to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IcsPair {
    /// h-iATE vs h-cATE.
    Horizontal,
    /// v-iATE vs v-cATE.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IcsTestKind {
    HPair,
    VPair,
    Global,
}

#[derive(Debug, Clone, Serialize)]
pub struct IcsTestResult {
    pub kind: IcsTestKind,
    /// t statistic for pairwise tests, F statistic for the global test.
    pub statistic: f64,
    pub num_df: usize,
    pub den_df: usize,
    pub p_value: f64,
    /// ψ-scale estimates entering the test (2 or 4 entries, scheme order
    /// h-iATE, h-cATE, v-iATE, v-cATE for the global test).
    pub estimates: Vec<f64>,
    /// Jackknife covariance of the estimates vector.
    pub covariance: Vec<Vec<f64>>,
}

/// ψ-scale τ̂ for several estimands from one model fit on one subset.
fn taus_on(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    kinds: &[SchemeKind],
    subset: &ClusterSubset,
    scale: ContrastScale,
    periods: &[usize],
) -> Result<Vec<f64>> {
    let prepared = prepare_subset(data, frame, method, subset)?;
    kinds
        .iter()
        .map(|&k| {
            value_for_scheme(data, frame, method, &prepared, k, subset, scale, periods)
                .map(|v| v.psi_tau)
        })
        .collect()
}

/// Jackknife all four estimands at once, sharing the model refit of every
/// leave-one-out subset. Degenerate subsets abort (the `Error` policy).
pub fn jackknife_all_estimands(
    data: &TrialDataset,
    method: &Method,
    scale: ContrastScale,
) -> Result<Vec<EstimateResult>> {
    let kinds = SchemeKind::ALL;
    let frame = match method.spec() {
        Some(spec) => Some(Arc::new(ModelFrame::new(data, spec)?)),
        None => None,
    };
    let n_i = data.n_clusters();
    let subset = ClusterSubset::full(n_i);
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let prepared = prepare_subset(data, frame.as_ref(), method, &subset)?;
    let full: Vec<PointValue> = kinds
        .iter()
        .map(|&k| {
            value_for_scheme(
                data,
                frame.as_ref(),
                method,
                &prepared,
                k,
                &subset,
                scale,
                &all_periods,
            )
        })
        .collect::<Result<_>>()?;

    let reps: Vec<Result<Vec<PointValue>>> = (0..n_i)
        .into_par_iter()
        .map(|g| {
            let sub = ClusterSubset::leave_out(n_i, g);
            let prepared = prepare_subset(data, frame.as_ref(), method, &sub)?;
            kinds
                .iter()
                .map(|&k| {
                    value_for_scheme(
                        data,
                        frame.as_ref(),
                        method,
                        &prepared,
                        k,
                        &sub,
                        scale,
                        &all_periods,
                    )
                })
                .collect()
        })
        .collect();
    let reps: Vec<Vec<PointValue>> = reps
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::EmptyArmInPeriod { period, arm } => Error::LocoDegenerate {
                cluster: "<loco>".into(),
                period,
                arm,
            },
            other => other,
        })?;

    Ok(kinds
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            let psi: Vec<(usize, f64)> = reps
                .iter()
                .enumerate()
                .map(|(g, r)| (g, r[ki].psi_tau))
                .collect();
            let mu = if reps.iter().all(|r| r[ki].mu.is_some()) {
                Some(
                    reps.iter()
                        .enumerate()
                        .map(|(g, r)| (g, r[ki].mu.unwrap()))
                        .collect(),
                )
            } else {
                None
            };
            let jk = JackknifeReplicates {
                psi_tau: psi,
                mu,
                dropped_periods: Vec::new(),
            };
            summarize(method, kind, scale, full[ki], &jk)
        })
        .collect())
}

fn loco_tau_vectors(
    data: &TrialDataset,
    frame: Option<&Arc<ModelFrame>>,
    method: &Method,
    kinds: &[SchemeKind],
    scale: ContrastScale,
) -> Result<Vec<Vec<f64>>> {
    let n_i = data.n_clusters();
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let results: Vec<Result<Vec<f64>>> = (0..n_i)
        .into_par_iter()
        .map(|g| {
            let subset = ClusterSubset::leave_out(n_i, g);
            taus_on(data, frame, method, kinds, &subset, scale, &all_periods).map_err(|e| {
                match e {
                    Error::EmptyArmInPeriod { period, arm } => Error::LocoDegenerate {
                        cluster: data.cluster_labels()[g].clone(),
                        period,
                        arm,
                    },
                    other => other,
                }
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Pairwise test of estimand equality (informative cluster / cluster-period
/// size). `method` is the estimator producing τ̂ for both estimands.
pub fn pairwise_ics_test(
    data: &TrialDataset,
    method: &Method,
    pair: IcsPair,
    scale: ContrastScale,
) -> Result<IcsTestResult> {
    let kinds = match pair {
        IcsPair::Horizontal => [SchemeKind::HIate, SchemeKind::HCate],
        IcsPair::Vertical => [SchemeKind::VIate, SchemeKind::VCate],
    };
    let frame = match method.spec() {
        Some(spec) => Some(Arc::new(ModelFrame::new(data, spec)?)),
        None => None,
    };
    let subset = ClusterSubset::full(data.n_clusters());
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let full = taus_on(data, frame.as_ref(), method, &kinds, &subset, scale, &all_periods)?;
    let reps = loco_tau_vectors(data, frame.as_ref(), method, &kinds, scale)?;
    let d: Vec<f64> = reps.iter().map(|v| v[0] - v[1]).collect();
    let v_d = jackknife_variance(&d);
    let diff = full[0] - full[1];
    let den_df = data.n_clusters() - 1;
    // Degenerate equality guard: identical estimands give a 0/0 statistic.
    let (stat, p) = if diff.abs() < 1e-12 && v_d < 1e-12 {
        (0.0, 1.0)
    } else {
        let w = diff / v_d.sqrt();
        (w, t_two_sided_p(w, den_df as f64))
    };
    Ok(IcsTestResult {
        kind: match pair {
            IcsPair::Horizontal => IcsTestKind::HPair,
            IcsPair::Vertical => IcsTestKind::VPair,
        },
        statistic: stat,
        num_df: 1,
        den_df,
        p_value: p,
        estimates: full,
        covariance: vec![vec![v_d]],
    })
}

/// Global F test of equality of all four estimands.
pub fn global_ics_test(
    data: &TrialDataset,
    method: &Method,
    scale: ContrastScale,
) -> Result<IcsTestResult> {
    let kinds = SchemeKind::ALL;
    let frame = match method.spec() {
        Some(spec) => Some(Arc::new(ModelFrame::new(data, spec)?)),
        None => None,
    };
    let subset = ClusterSubset::full(data.n_clusters());
    let all_periods: Vec<usize> = data.rollout_periods().collect();
    let full = taus_on(data, frame.as_ref(), method, &kinds, &subset, scale, &all_periods)?;
    let reps = loco_tau_vectors(data, frame.as_ref(), method, &kinds, scale)?;
    let n = reps.len() as f64;
    let mut mean = [0.0; 4];
    for r in &reps {
        for k in 0..4 {
            mean[k] += r[k] / n;
        }
    }
    let mut vhat = DMatrix::zeros(4, 4);
    for r in &reps {
        for a in 0..4 {
            for b in 0..4 {
                vhat[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    vhat *= (n - 1.0) / n;

    // C has rank 3: the three independent equality contrasts.
    let c = DMatrix::from_row_slice(
        3,
        4,
        &[
            1.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, -1.0, //
            1.0, 0.0, -1.0, 0.0,
        ],
    );
    let tau = DVector::from_row_slice(&full);
    let ctau = &c * &tau;
    let cvc = &c * &vhat * c.transpose();
    let eig = cvc.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min_ev = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    let cond = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    let den_df = data.n_clusters() - 1;
    let p_contrasts = 3.0;
    if ctau.amax() < 1e-12 && max_ev < 1e-12 {
        // all four estimates numerically identical
        return Ok(IcsTestResult {
            kind: IcsTestKind::Global,
            statistic: 0.0,
            num_df: 3,
            den_df,
            p_value: 1.0,
            estimates: full,
            covariance: mat_to_vec(&vhat),
        });
    }
    if cond > 1e12 {
        return Err(Error::SingularContrastCovariance(cond));
    }
    let inv = cvc
        .try_inverse()
        .ok_or(Error::SingularContrastCovariance(cond))?;
    let f_stat = (ctau.transpose() * inv * &ctau)[(0, 0)] / p_contrasts;
    let p_value = f_upper_p(f_stat, p_contrasts, den_df as f64);
    Ok(IcsTestResult {
        kind: IcsTestKind::Global,
        statistic: f_stat,
        num_df: 3,
        den_df,
        p_value,
        estimates: full,
        covariance: mat_to_vec(&vhat),
    })
}

fn mat_to_vec(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect())
        .collect()
}
