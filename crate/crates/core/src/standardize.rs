//! Model-robust standardization: the augmented estimator.
//!
//! For arm z and rollout period j, with working predictions m_zj per cluster,
//!
//! ```text
//! μ̂_j(z) = Σ_i ω_ij m_zj(i) / ω_j
//!        + Σ_i ω_ij 1{Z_ij=z} (Ȳ_ij − m_zj(i)) / Σ_i ω_ij 1{Z_ij=z},
//! ```
//!
//! which decomposes into the period-j unadjusted estimator plus an
//! augmentation term that contrasts the model's average prediction over all
//! clusters against its average over the arm-z clusters. Predictions that
//! are constant across clusters cancel exactly, so a covariate-free working
//! model reproduces the unadjusted estimator. Period estimates are pooled
//! with the scheme's ω_j weights over j = 2..J-1.

use crate::contrast::{apply_contrast, ContrastScale};
use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};
use crate::estimator::{arm_period_mean, period_weight_on};
use crate::models::{FittedModel, PredictionSet};
use crate::weights::WeightScheme;

/// One period's augmented estimate with its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodAugmentedEstimate {
    pub period: usize,
    pub arm: u8,
    /// The period-j unadjusted estimator.
    pub unadjusted: f64,
    /// The regression correction (zero when predictions are constant).
    pub augmentation: f64,
    /// unadjusted + augmentation.
    pub value: f64,
}

/// Augmented estimate of μ_ω,j(z) for a single rollout period.
pub fn mrs_mu_period(
    data: &TrialDataset,
    scheme: &WeightScheme,
    preds: &PredictionSet,
    subset: &ClusterSubset,
    z: u8,
    period: usize,
) -> Result<PeriodAugmentedEstimate> {
    if !(2..data.n_periods()).contains(&period) {
        return Err(Error::PeriodOutOfRange(period));
    }
    let mut pred_all = 0.0; // Σ_i ω_ij m
    let mut w_all = 0.0; // ω_j
    let mut obs_arm = 0.0; // Σ_i ω_ij 1{Z=z} Ȳ_ij
    let mut pred_arm = 0.0; // Σ_i ω_ij 1{Z=z} m
    let mut w_arm = 0.0;
    for i in subset.iter() {
        let w = scheme.cell(i, period);
        if w == 0.0 {
            continue;
        }
        let m = preds.get(z, i, period);
        if m.is_nan() {
            return Err(Error::PredictionMissing {
                cluster: data.cluster_labels()[i].clone(),
                period,
            });
        }
        pred_all += w * m;
        w_all += w;
        if data.cell_size(i, period) > 0 && data.cell_treatment(i, period) == z {
            obs_arm += w * scheme.cell_outcome_mean(data, i, period);
            pred_arm += w * m;
            w_arm += w;
        }
    }
    if w_arm <= 0.0 {
        return Err(Error::EmptyArmInPeriod { period, arm: z });
    }
    let unadjusted = obs_arm / w_arm;
    let augmentation = pred_all / w_all - pred_arm / w_arm;
    Ok(PeriodAugmentedEstimate {
        period,
        arm: z,
        unadjusted,
        augmentation,
        value: pred_all / w_all + (obs_arm - pred_arm) / w_arm,
    })
}

/// Pooled augmented estimate μ̂(z): ω_j-weighted average over rollout
/// periods of the per-period augmented estimates.
pub fn mrs_mu_pooled(
    data: &TrialDataset,
    scheme: &WeightScheme,
    preds: &PredictionSet,
    subset: &ClusterSubset,
    z: u8,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for j in data.rollout_periods() {
        let w_j = period_weight_on(scheme, subset, j);
        let est = mrs_mu_period(data, scheme, preds, subset, z, j)?;
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

/// μ̂(z) from a fitted working model (predictions computed on demand).
pub fn mrs_mu(
    data: &TrialDataset,
    scheme: &WeightScheme,
    model: &FittedModel,
    z: u8,
) -> Result<f64> {
    let preds = PredictionSet::compute(model, data)?;
    mrs_mu_pooled(
        data,
        scheme,
        &preds,
        &ClusterSubset::full(data.n_clusters()),
        z,
    )
}

/// τ̂ = f(μ̂(1), μ̂(0)) from a fitted working model.
pub fn mrs_tau(
    data: &TrialDataset,
    scheme: &WeightScheme,
    model: &FittedModel,
    scale: ContrastScale,
) -> Result<f64> {
    let preds = PredictionSet::compute(model, data)?;
    let subset = ClusterSubset::full(data.n_clusters());
    let mu1 = mrs_mu_pooled(data, scheme, &preds, &subset, 1)?;
    let mu0 = mrs_mu_pooled(data, scheme, &preds, &subset, 0)?;
    apply_contrast(scale, mu1, mu0)
}

/// The period-j unadjusted estimator, exposed for decomposition checks.
pub fn unadjusted_period(
    data: &TrialDataset,
    scheme: &WeightScheme,
    subset: &ClusterSubset,
    z: u8,
    period: usize,
) -> Result<f64> {
    arm_period_mean(data, scheme, subset, z, period)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use crate::weights::{resolve_weights, SchemeKind};
    use approx::assert_abs_diff_eq;

    /// I=4, J=3; treated clusters {0,1} with period-2 means {3,5}; control
    /// {2,3} with means {1,2}; two rows per cell.
    fn toy_trial() -> TrialDataset {
        let mut rows = Vec::new();
        for i in 0..4usize {
            let a = if i < 2 { 2 } else { 3 };
            let means = [3.0, 5.0, 1.0, 2.0];
            for j in 1..=3usize {
                let mean = if j == 2 { means[i] } else { 0.5 };
                for _ in 0..2 {
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: u8::from(j >= a),
                        outcome: mean,
                        covariates: vec![],
                    });
                }
            }
        }
        TrialDataset::from_canonical_rows(rows, 4, 3, vec![]).unwrap()
    }

    fn const_preds(data: &TrialDataset, c1: f64, c0: f64) -> PredictionSet {
        let n = data.n_clusters() * data.n_periods();
        PredictionSet::from_values(vec![c0; n], vec![c1; n], data.n_periods())
    }

    #[test]
    fn zero_predictions_reduce_to_unadjusted() {
        let data = toy_trial();
        let scheme = resolve_weights(&data, SchemeKind::HIate).unwrap();
        let subset = ClusterSubset::full(4);
        let preds = const_preds(&data, 0.0, 0.0);
        let est = mrs_mu_period(&data, &scheme, &preds, &subset, 1, 2).unwrap();
        assert_abs_diff_eq!(est.value, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.augmentation, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_predictions_cancel_exactly() {
        let data = toy_trial();
        for kind in SchemeKind::ALL {
            let scheme = resolve_weights(&data, kind).unwrap();
            let subset = ClusterSubset::full(4);
            let preds = const_preds(&data, 17.3, -4.1);
            for z in [0u8, 1u8] {
                let est = mrs_mu_period(&data, &scheme, &preds, &subset, z, 2).unwrap();
                assert_abs_diff_eq!(est.augmentation, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(est.value, est.unadjusted, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hand_evaluated_augmented_estimate() {
        // m_1 = (4, 4, 2, 2) for arm 1 at period 2, HIate (all cells N=2,
        // so ω_ij = 2, ω_j = 8; treated arm weight = 4):
        // term1 = Σ ω m / ω_j = 2*(4+4+2+2)/8 = 3
        // term2 = Σ_{treated} ω (Ȳ − m)/4 = [2*(3−4) + 2*(5−4)]/4 = 0
        // → 3.0
        let data = toy_trial();
        let scheme = resolve_weights(&data, SchemeKind::HIate).unwrap();
        let subset = ClusterSubset::full(4);
        let n = data.n_clusters() * data.n_periods();
        let mut m1 = vec![f64::NAN; n];
        for (i, v) in [4.0, 4.0, 2.0, 2.0].into_iter().enumerate() {
            m1[i * 3 + 1] = v;
        }
        let preds = PredictionSet::from_values(vec![0.0; n], m1, 3);
        let est = mrs_mu_period(&data, &scheme, &preds, &subset, 1, 2).unwrap();
        assert_abs_diff_eq!(est.value, 3.0, epsilon = 1e-12);
        // decomposition: unadjusted 4.0, augmentation 3 − 4 = −1
        assert_abs_diff_eq!(est.unadjusted, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.augmentation, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            est.unadjusted + est.augmentation,
            est.value,
            epsilon = 1e-12
        );
    }

    #[test]
    fn prediction_shift_invariance() {
        let data = toy_trial();
        let scheme = resolve_weights(&data, SchemeKind::VCate).unwrap();
        let subset = ClusterSubset::full(4);
        let n = data.n_clusters() * data.n_periods();
        let mut m1 = vec![f64::NAN; n];
        for (i, v) in [4.0, 1.0, 2.0, -3.0].into_iter().enumerate() {
            m1[i * 3 + 1] = v;
        }
        let preds = PredictionSet::from_values(vec![0.0; n], m1.clone(), 3);
        let base = mrs_mu_period(&data, &scheme, &preds, &subset, 1, 2).unwrap();
        let shifted: Vec<f64> = m1.iter().map(|v| v + 11.0).collect();
        let preds2 = PredictionSet::from_values(vec![0.0; n], shifted, 3);
        let shift = mrs_mu_period(&data, &scheme, &preds2, &subset, 1, 2).unwrap();
        assert_abs_diff_eq!(base.value, shift.value, epsilon = 1e-12);
    }

    #[test]
    fn missing_prediction_reported() {
        let data = toy_trial();
        let scheme = resolve_weights(&data, SchemeKind::HIate).unwrap();
        let subset = ClusterSubset::full(4);
        let n = data.n_clusters() * data.n_periods();
        let preds = PredictionSet::from_values(vec![f64::NAN; n], vec![f64::NAN; n], 3);
        assert!(matches!(
            mrs_mu_period(&data, &scheme, &preds, &subset, 1, 2),
            Err(Error::PredictionMissing { .. })
        ));
    }

    #[test]
    fn single_rollout_period_pooling_is_identity() {
        let data = toy_trial();
        let scheme = resolve_weights(&data, SchemeKind::HCate).unwrap();
        let subset = ClusterSubset::full(4);
        let preds = const_preds(&data, 1.0, 1.0);
        let per = mrs_mu_period(&data, &scheme, &preds, &subset, 1, 2).unwrap();
        let pooled = mrs_mu_pooled(&data, &scheme, &preds, &subset, 1).unwrap();
        assert_abs_diff_eq!(per.value, pooled, epsilon = 1e-15);
    }
}
