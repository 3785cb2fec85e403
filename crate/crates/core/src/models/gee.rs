//! Independence estimating equations via iteratively reweighted least
//! squares. With a gaussian family and identity link the first iteration is
//! exactly ordinary least squares and the loop stops after confirming a zero
//! coefficient change.

use nalgebra::{Cholesky, DMatrix, DVector};
use std::sync::Arc;

use crate::data::ClusterSubset;
use crate::error::{Error, Result};

use super::design::ModelFrame;
use super::family::{Family, Link};
use super::{Convergence, FittedModel, VarianceComponents};

const MAX_ITER: usize = 100;
const COEF_TOL: f64 = 1e-8;
/// A fitted probability within this distance of {0, 1} counts as saturated.
const SEPARATION_EPS: f64 = 1e-10;

pub fn fit_gee_independence_on(
    frame: &Arc<ModelFrame>,
    subset: &ClusterSubset,
) -> Result<FittedModel> {
    frame.spec.validate()?;
    let p = frame.p();
    let (family, link) = (frame.spec.family, frame.spec.link);

    if family == Family::Gaussian && link == Link::Identity {
        // Closed form: one weighted solve with unit weights.
        let (xtx, xty, _, n) = frame.normal_equations(subset);
        if n <= p {
            return Err(Error::RankDeficientDesign(format!(
                "{n} observations for {p} columns"
            )));
        }
        let chol = Cholesky::new(xtx).ok_or_else(|| {
            Error::RankDeficientDesign("X'X not positive definite".into())
        })?;
        let beta = chol.solve(&xty);
        return Ok(finish(frame, beta, Convergence::exact()));
    }

    let mut beta = DVector::zeros(p);
    let mut iterations = 0;
    let mut converged = false;
    let mut xtx = DMatrix::zeros(p, p);
    let mut xtz = DVector::zeros(p);
    while iterations < MAX_ITER {
        iterations += 1;
        xtx.fill(0.0);
        xtz.fill(0.0);
        for cell in &frame.cells {
            if !subset.contains(cell.cluster) {
                continue;
            }
            for r in cell.row_start..cell.row_start + cell.n {
                let xr = frame.row(r);
                let eta = frame.eta_row(r, &beta);
                let mu = link.inv(eta);
                let dmu = link.mu_eta(eta).max(1e-10);
                let var = family.variance(mu);
                let w = dmu * dmu / var;
                let z = eta + (frame.y[r] - mu) / dmu;
                for a in 0..p {
                    let xa = xr[a];
                    if xa == 0.0 {
                        continue;
                    }
                    xtz[a] += w * xa * z;
                    for b in 0..=a {
                        xtx[(a, b)] += w * xa * xr[b];
                    }
                }
            }
        }
        for a in 0..p {
            for b in (a + 1)..p {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let chol = Cholesky::new(xtx.clone()).ok_or_else(|| {
            Error::RankDeficientDesign("weighted X'WX not positive definite".into())
        })?;
        let new_beta = chol.solve(&xtz);
        let denom = 1.0 + beta.amax();
        let change = (&new_beta - &beta).amax() / denom;
        beta = new_beta;
        if change < COEF_TOL {
            converged = true;
            break;
        }
    }

    if family == Family::Binomial {
        check_separation(frame, subset, &beta)?;
    }
    if !converged {
        return Err(Error::IrlsNonConvergence(MAX_ITER));
    }
    Ok(finish(
        frame,
        beta,
        Convergence {
            iterations,
            objective: 0.0,
            grad_norm: 0.0,
            converged: true,
            boundary: false,
            accepted_objectives: Vec::new(),
        },
    ))
}

/// Error when an entire arm-period's fitted probabilities are saturated.
fn check_separation(frame: &ModelFrame, subset: &ClusterSubset, beta: &DVector<f64>) -> Result<()> {
    let n_j = frame.n_periods;
    // (arm, period) -> (count, saturated count)
    let mut counts = vec![(0usize, 0usize); 2 * (n_j + 1)];
    for cell in &frame.cells {
        if !subset.contains(cell.cluster) {
            continue;
        }
        let slot = usize::from(cell.treated) * (n_j + 1) + cell.period;
        for r in cell.row_start..cell.row_start + cell.n {
            let mu = frame.spec.link.inv(frame.eta_row(r, beta));
            counts[slot].0 += 1;
            if mu < SEPARATION_EPS || mu > 1.0 - SEPARATION_EPS {
                counts[slot].1 += 1;
            }
        }
    }
    for z in 0..2usize {
        for j in 1..=n_j {
            let (n, sat) = counts[z * (n_j + 1) + j];
            if n > 0 && sat == n {
                return Err(Error::SeparationDetected {
                    arm: z as u8,
                    period: j,
                });
            }
        }
    }
    Ok(())
}

fn finish(frame: &Arc<ModelFrame>, beta: DVector<f64>, convergence: Convergence) -> FittedModel {
    FittedModel {
        spec: frame.spec.clone(),
        coef: frame.expand_coefficients(&beta),
        vc: VarianceComponents::none(),
        convergence,
        frame: frame.clone(),
        active_coef: beta,
        centering: None,
        beta_cov: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IndividualRecord, TrialDataset};
    use crate::models::{
        CovariateTerm, EstimatorKind, RandomEffects, TreatmentEffect, WorkingModelSpec,
    };
    use approx::assert_abs_diff_eq;

    fn gee_spec(family: Family, link: Link, covs: Vec<CovariateTerm>) -> WorkingModelSpec {
        WorkingModelSpec {
            family,
            link,
            treatment_effect: TreatmentEffect::Constant,
            random_effects: RandomEffects::None,
            covariates: covs,
            estimator: EstimatorKind::GeeIndependence,
            ancova_interactions: false,
        }
    }

    #[test]
    fn gaussian_identity_matches_normal_equations_oracle() {
        let data = crate::models::lmm::tests::simulated_trial(31, 8, 4, 10, 0.4, 0.2, 1.0);
        let spec = gee_spec(
            Family::Gaussian,
            Link::Identity,
            vec![CovariateTerm::Named("x1".into())],
        );
        let fit = crate::models::fit_gee_independence(&data, &spec).unwrap();
        // dense normal-equations oracle
        let frame = ModelFrame::new(&data, &spec).unwrap();
        let (xtx, xty, _, _) = frame.normal_equations(&ClusterSubset::full(8));
        let beta = xtx.try_inverse().unwrap() * xty;
        for c in 0..frame.p() {
            assert_abs_diff_eq!(fit.active_coef[c], beta[c], epsilon = 1e-10);
        }
    }

    #[test]
    fn logit_intercept_only_closed_form() {
        // one cluster-period world is not a valid wedge, but the fitting
        // engine does not require one: outcome mean 0.25 -> logit(0.25)
        let mut rows = Vec::new();
        for i in 0..2usize {
            for j in 1..=3usize {
                let z = u8::from(j >= i + 2);
                for k in 0..4 {
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: z,
                        outcome: f64::from(k == 0),
                        covariates: vec![],
                    });
                }
            }
        }
        let data = TrialDataset::from_canonical_rows(rows, 2, 3, vec![]).unwrap();
        // period-effect-only model: every period mean is 0.25
        let mut spec = gee_spec(Family::Binomial, Link::Logit, vec![]);
        spec.treatment_effect = TreatmentEffect::Constant;
        let fit = crate::models::fit_gee_independence(&data, &spec).unwrap();
        let expect = (0.25f64 / 0.75).ln();
        for j in 0..3 {
            assert_abs_diff_eq!(fit.coef[j], expect, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(fit.coef[3], 0.0, epsilon = 1e-6); // no treatment signal
    }

    #[test]
    fn perfect_separation_detected() {
        // outcome equals the treatment indicator: fitted probabilities
        // saturate for every arm-period
        let mut rows = Vec::new();
        for i in 0..4usize {
            let a = if i < 2 { 2 } else { 3 };
            for j in 1..=3usize {
                let z = u8::from(j >= a);
                for _ in 0..3 {
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: z,
                        outcome: f64::from(z),
                        covariates: vec![],
                    });
                }
            }
        }
        let data = TrialDataset::from_canonical_rows(rows, 4, 3, vec![]).unwrap();
        let spec = gee_spec(Family::Binomial, Link::Logit, vec![]);
        assert!(matches!(
            crate::models::fit_gee_independence(&data, &spec),
            Err(Error::SeparationDetected { .. })
        ));
    }
}
