//! Linear mixed models by profiled REML.
//!
//! The model is `y = Xβ + α_i + γ_ij + ε` with cluster intercepts α_i,
//! optional cluster-period intercepts γ_ij, and iid noise. The per-cluster
//! covariance is
//!
//! ```text
//! V_i = σ² I + τ_α² 1 1' + τ_γ² blockdiag_j(1 1')
//! ```
//!
//! so with the variance ratios φ = (τ_α²/σ², τ_γ²/σ²) every GLS quantity
//! reduces to cell-level sufficient statistics via Sherman-Morrison: writing
//! d_c = 1 + N_c φ_γ for cell c,
//!
//! ```text
//! X'V0⁻¹X = Σ_c (Σxx' − (φ_γ/d_c) Σx Σx') − κ_i v_i v_i',
//! v_i = Σ_c Σx/d_c,  t_i = Σ_c N_c/d_c,  κ_i = φ_α/(1 + φ_α t_i),
//! log|V0_i| = Σ_c log d_c + log(1 + φ_α t_i).
//! ```
//!
//! σ² is profiled out (σ̂² = y'P0y/(n−p)), leaving a 1- or 2-dimensional
//! search over log φ: a Nelder-Mead start followed by a damped
//! finite-difference Newton polish. Components that end below 1e-10 are
//! reported as boundary solutions, not errors.

use nalgebra::{Cholesky, DMatrix, DVector};
use std::sync::Arc;

use crate::data::ClusterSubset;
use crate::error::{Error, Result};

use super::design::ModelFrame;
use super::optim::{nelder_mead, newton_polish, Trace};
use super::{Convergence, FittedModel, RandomEffects, VarianceComponents};

struct GlsParts {
    m: DMatrix<f64>,
    b: DVector<f64>,
    q: f64,
    logdet_v0: f64,
    n: usize,
}

/// Accumulate GLS normal equations under variance ratios (φ_α, φ_γ).
fn gls_parts(frame: &ModelFrame, subset: &ClusterSubset, phi_a: f64, phi_g: f64) -> GlsParts {
    let p = frame.p();
    let mut m = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut q = 0.0;
    let mut logdet = 0.0;
    let mut n = 0usize;

    let mut v_i = DVector::zeros(p);
    let mut idx = 0usize;
    let cells = &frame.cells;
    while idx < cells.len() {
        let cluster = cells[idx].cluster;
        let mut end = idx;
        while end < cells.len() && cells[end].cluster == cluster {
            end += 1;
        }
        if subset.contains(cluster) {
            v_i.fill(0.0);
            let mut w_i = 0.0;
            let mut t_i = 0.0;
            for cell in &cells[idx..end] {
                let d_c = 1.0 + cell.n as f64 * phi_g;
                let lam = phi_g / d_c;
                m += &cell.sxx;
                if lam != 0.0 {
                    m.syger(-lam, &cell.sx, &cell.sx, 1.0);
                    b.axpy(-lam * cell.sy, &cell.sx, 1.0);
                    q -= lam * cell.sy * cell.sy;
                }
                b += &cell.sxy;
                q += cell.syy;
                v_i.axpy(1.0 / d_c, &cell.sx, 1.0);
                w_i += cell.sy / d_c;
                t_i += cell.n as f64 / d_c;
                logdet += d_c.ln();
                n += cell.n;
            }
            if phi_a != 0.0 {
                let kappa = phi_a / (1.0 + phi_a * t_i);
                m.syger(-kappa, &v_i, &v_i, 1.0);
                b.axpy(-kappa * w_i, &v_i, 1.0);
                q -= kappa * w_i * w_i;
                logdet += (1.0 + phi_a * t_i).ln();
            }
        }
        idx = end;
    }
    // syger touches the lower triangle; mirror it
    for a in 0..p {
        for c in (a + 1)..p {
            m[(a, c)] = m[(c, a)];
        }
    }
    GlsParts {
        m,
        b,
        q,
        logdet_v0: logdet,
        n,
    }
}

struct Profiled {
    deviance: f64,
    beta: DVector<f64>,
    sigma2: f64,
}

fn profiled(frame: &ModelFrame, subset: &ClusterSubset, phi_a: f64, phi_g: f64) -> Option<Profiled> {
    let parts = gls_parts(frame, subset, phi_a, phi_g);
    let p = frame.p();
    let chol = Cholesky::new(parts.m.clone())?;
    let beta = chol.solve(&parts.b);
    let rss = (parts.q - parts.b.dot(&beta)).max(0.0);
    let dof = parts.n.checked_sub(p)?.max(1) as f64;
    let sigma2 = rss / dof;
    let logdet_m: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let deviance = dof * rss.max(1e-300).ln() + parts.logdet_v0 + logdet_m;
    Some(Profiled {
        deviance,
        beta,
        sigma2,
    })
}

/// The REML deviance (−2 restricted log-likelihood up to an additive
/// constant) as a function of the absolute variance components
/// (τ_α², τ_γ², σ_ε²). Used by the finite-difference optimality checks.
pub fn reml_deviance(
    frame: &ModelFrame,
    subset: &ClusterSubset,
    tau_a2: f64,
    tau_g2: f64,
    sigma2: f64,
) -> f64 {
    let parts = gls_parts(frame, subset, tau_a2 / sigma2, tau_g2 / sigma2);
    let p = frame.p();
    let n = parts.n as f64;
    let Some(chol) = Cholesky::new(parts.m.clone()) else {
        return f64::INFINITY;
    };
    let beta = chol.solve(&parts.b);
    let ypy = (parts.q - parts.b.dot(&beta)).max(0.0) / sigma2;
    // |V| = σ^{2n} |V0|; |X'V⁻¹X| = σ^{-2p} |X'V0⁻¹X|
    let logdet_m: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    (n - p as f64) * sigma2.ln() + parts.logdet_v0 + logdet_m + ypy
}

const LOG_PHI_CLAMP: f64 = 34.0;
const BOUNDARY_VC: f64 = 1e-10;

pub fn fit_lmm_on(frame: &Arc<ModelFrame>, subset: &ClusterSubset) -> Result<FittedModel> {
    frame.spec.validate()?;
    let two_components =
        frame.spec.random_effects == RandomEffects::ClusterPlusClusterPeriod;
    let p = frame.p();

    // Rank check and degenerate-data shortcut at φ = 0 (plain OLS).
    let ols = profiled(frame, subset, 0.0, 0.0).ok_or_else(|| {
        Error::RankDeficientDesign(format!("X'X not positive definite with p = {p}"))
    })?;
    let (_, _, yty, n) = frame.normal_equations(subset);
    if n <= p {
        return Err(Error::RankDeficientDesign(format!(
            "{n} observations for {p} columns"
        )));
    }
    let rss_ols = ols.sigma2 * (n - p) as f64;
    if rss_ols <= 1e-12 * yty.max(1.0) {
        // Residual variance is numerically zero (e.g. all-zero outcomes):
        // every component sits on the boundary and the GLS fit is the OLS fit.
        let coef = frame.expand_coefficients(&ols.beta);
        return Ok(FittedModel {
            spec: frame.spec.clone(),
            coef,
            vc: VarianceComponents {
                cluster: 0.0,
                cell: 0.0,
                residual: ols.sigma2,
            },
            convergence: Convergence {
                iterations: 1,
                objective: ols.deviance,
                grad_norm: 0.0,
                converged: true,
                boundary: true,
                accepted_objectives: vec![ols.deviance],
            },
            frame: frame.clone(),
            active_coef: ols.beta,
            centering: None,
            beta_cov: None,
        });
    }

    let dim = if two_components { 2 } else { 1 };
    let mut trace = Trace::default();
    let objective = |x: &[f64]| -> f64 {
        let pa = x[0].clamp(-LOG_PHI_CLAMP, LOG_PHI_CLAMP).exp();
        let pg = if dim == 2 {
            x[1].clamp(-LOG_PHI_CLAMP, LOG_PHI_CLAMP).exp()
        } else {
            0.0
        };
        profiled(frame, subset, pa, pg).map_or(f64::INFINITY, |r| r.deviance)
    };

    let start = vec![(0.1f64).ln(); dim];
    let best = nelder_mead(objective, &start, 1.5, 200, 1e-12, &mut trace);
    let scaled_tol = |fx: f64| 1e-6 * (1.0 + fx.abs() / 1000.0);
    let (x, deviance, grad_norm, _) =
        newton_polish(objective, &best, 1e-4, scaled_tol, 100, &mut trace);

    let phi_a = x[0].clamp(-LOG_PHI_CLAMP, LOG_PHI_CLAMP).exp();
    let phi_g = if dim == 2 {
        x[1].clamp(-LOG_PHI_CLAMP, LOG_PHI_CLAMP).exp()
    } else {
        0.0
    };
    let fit = profiled(frame, subset, phi_a, phi_g)
        .ok_or_else(|| Error::RankDeficientDesign("GLS system singular at optimum".into()))?;
    let sigma2 = fit.sigma2;
    let vc = VarianceComponents {
        cluster: phi_a * sigma2,
        cell: phi_g * sigma2,
        residual: sigma2,
    };
    let boundary =
        vc.cluster < BOUNDARY_VC || (two_components && vc.cell < BOUNDARY_VC);
    let converged = grad_norm <= scaled_tol(deviance);
    if !converged && !boundary {
        return Err(Error::OptimizerNonConvergence {
            max_iter: trace.evaluations,
            grad_norm,
        });
    }
    let coef = frame.expand_coefficients(&fit.beta);
    Ok(FittedModel {
        spec: frame.spec.clone(),
        coef,
        vc,
        convergence: Convergence {
            iterations: trace.evaluations,
            objective: deviance,
            grad_norm,
            converged,
            boundary,
            accepted_objectives: trace.accepted,
        },
        frame: frame.clone(),
        active_coef: fit.beta,
        centering: None,
        beta_cov: None,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{IndividualRecord, TrialDataset};
    use crate::models::{
        CovariateTerm, EstimatorKind, Family, Link, TreatmentEffect, WorkingModelSpec,
    };
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn lmm_spec(re: RandomEffects) -> WorkingModelSpec {
        WorkingModelSpec {
            family: Family::Gaussian,
            link: Link::Identity,
            treatment_effect: TreatmentEffect::Constant,
            random_effects: re,
            covariates: vec![CovariateTerm::Named("x1".into())],
            estimator: EstimatorKind::LmmReml,
            ancova_interactions: false,
        }
    }

    pub(crate) fn simulated_trial(
        seed: u64,
        n_i: usize,
        n_j: usize,
        n_per_cell: usize,
        tau_a: f64,
        tau_g: f64,
        sigma: f64,
    ) -> TrialDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..n_i {
            let a = 2 + i % (n_j - 1);
            let alpha: f64 = tau_a * rng.sample::<f64, _>(StandardNormal);
            for j in 1..=n_j {
                let gamma: f64 = tau_g * rng.sample::<f64, _>(StandardNormal);
                let z = u8::from(j >= a);
                for _ in 0..n_per_cell {
                    let x: f64 = rng.sample(StandardNormal);
                    let eps: f64 = sigma * rng.sample::<f64, _>(StandardNormal);
                    let y = 0.3 * j as f64 + 1.5 * f64::from(z) + 0.8 * x + alpha + gamma + eps;
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: z,
                        outcome: y,
                        covariates: vec![x],
                    });
                }
            }
        }
        TrialDataset::from_canonical_rows(rows, n_i, n_j, vec!["x1".into()]).unwrap()
    }

    #[test]
    fn pure_noise_hits_boundary_and_matches_ols_variance() {
        // τ_α² = τ_γ² = 0 in truth: REML should drive both to the boundary
        // and σ̂² should be close to the OLS residual variance.
        let data = simulated_trial(7, 10, 4, 40, 0.0, 0.0, 1.0);
        let spec = lmm_spec(RandomEffects::ClusterPlusClusterPeriod);
        let fit = crate::models::fit_lmm(&data, &spec).unwrap();
        assert!(fit.vc.cluster < 5e-3, "cluster vc {}", fit.vc.cluster);
        assert!(fit.vc.cell < 5e-3, "cell vc {}", fit.vc.cell);

        // OLS residual variance oracle via the normal equations
        let frame = ModelFrame::new(&data, &spec).unwrap();
        let subset = ClusterSubset::full(data.n_clusters());
        let (xtx, xty, yty, n) = frame.normal_equations(&subset);
        let beta = Cholesky::new(xtx).unwrap().solve(&xty);
        let rss = yty - xty.dot(&beta);
        let s2_ols = rss / (n - frame.p()) as f64;
        assert!(
            (fit.vc.residual - s2_ols).abs() / s2_ols < 0.05,
            "σ̂² {} vs OLS {}",
            fit.vc.residual,
            s2_ols
        );
    }

    #[test]
    fn recovers_variance_components_roughly() {
        let data = simulated_trial(11, 24, 5, 30, 0.7, 0.4, 1.0);
        let spec = lmm_spec(RandomEffects::ClusterPlusClusterPeriod);
        let fit = crate::models::fit_lmm(&data, &spec).unwrap();
        assert!(fit.convergence.converged);
        assert!((fit.vc.cluster.sqrt() - 0.7).abs() < 0.35, "τ_α {}", fit.vc.cluster.sqrt());
        assert!((fit.vc.cell.sqrt() - 0.4).abs() < 0.2, "τ_γ {}", fit.vc.cell.sqrt());
        assert!((fit.vc.residual - 1.0).abs() < 0.1);
        // REML objective non-increasing over accepted iterations
        for w in fit.convergence.accepted_objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn gls_at_fixed_components_matches_dense_oracle() {
        // 3 clusters, tiny cells: build the dense covariance matrix directly
        // and compare the GLS solution at fixed variance ratios.
        let data = simulated_trial(3, 3, 3, 3, 0.5, 0.3, 0.9);
        let spec = lmm_spec(RandomEffects::ClusterPlusClusterPeriod);
        let frame = ModelFrame::new(&data, &spec).unwrap();
        let subset = ClusterSubset::full(3);
        let (phi_a, phi_g) = (0.4, 0.2);
        let fit = profiled(&frame, &subset, phi_a, phi_g).unwrap();

        // dense oracle
        let n = data.n_rows();
        let p = frame.p();
        let mut v = DMatrix::zeros(n, n);
        for r in 0..n {
            for s in 0..n {
                let (a, b) = (&data.rows()[r], &data.rows()[s]);
                let mut cov = 0.0;
                if a.cluster == b.cluster {
                    cov += phi_a;
                    if a.period == b.period {
                        cov += phi_g;
                    }
                }
                if r == s {
                    cov += 1.0;
                }
                v[(r, s)] = cov;
            }
        }
        let vinv = v.try_inverse().unwrap();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        for r in 0..n {
            for c in 0..p {
                x[(r, c)] = frame.row(r)[c];
            }
            y[r] = frame.y[r];
        }
        let m = x.transpose() * &vinv * &x;
        let b = x.transpose() * &vinv * &y;
        let beta_oracle = m.try_inverse().unwrap() * b;
        for c in 0..p {
            assert_abs_diff_eq!(fit.beta[c], beta_oracle[c], epsilon = 1e-8);
        }
    }

    #[test]
    fn all_zero_outcomes_degenerate_fit() {
        let mut data = simulated_trial(5, 6, 4, 5, 0.5, 0.2, 1.0);
        let rows: Vec<IndividualRecord> = data
            .rows()
            .iter()
            .map(|r| IndividualRecord {
                outcome: 0.0,
                ..r.clone()
            })
            .collect();
        data = TrialDataset::from_canonical_rows(rows, 6, 4, vec!["x1".into()]).unwrap();
        let fit = crate::models::fit_lmm(&data, &lmm_spec(RandomEffects::ClusterPlusClusterPeriod)).unwrap();
        assert!(fit.coef.iter().all(|&c| c.abs() < 1e-12));
        assert_eq!(fit.vc.cluster, 0.0);
        assert_eq!(fit.vc.cell, 0.0);
        assert!(fit.convergence.boundary);
    }

    #[test]
    fn full_deviance_gradient_vanishes_at_profiled_optimum() {
        let data = simulated_trial(19, 12, 4, 12, 0.6, 0.3, 1.0);
        let spec = lmm_spec(RandomEffects::ClusterPlusClusterPeriod);
        let frame = ModelFrame::new(&data, &spec).unwrap();
        let subset = ClusterSubset::full(12);
        let fit = fit_lmm_on(&std::sync::Arc::new(ModelFrame::new(&data, &spec).unwrap()), &subset).unwrap();
        let f = |lv: &[f64]| {
            reml_deviance(&frame, &subset, lv[0].exp(), lv[1].exp(), lv[2].exp())
        };
        let at = [
            fit.vc.cluster.max(1e-12).ln(),
            fit.vc.cell.max(1e-12).ln(),
            fit.vc.residual.ln(),
        ];
        let g = crate::models::optim::fd_gradient(f, &at, 1e-5);
        for gi in g {
            assert!(gi.abs() < 1e-3, "gradient component {gi}");
        }
    }

    #[test]
    fn rank_deficient_design_detected() {
        // duplicate covariate column makes X'X singular
        let base = simulated_trial(23, 5, 3, 4, 0.3, 0.0, 1.0);
        let rows: Vec<IndividualRecord> = base
            .rows()
            .iter()
            .map(|r| IndividualRecord {
                covariates: vec![r.covariates[0], r.covariates[0]],
                ..r.clone()
            })
            .collect();
        let data =
            TrialDataset::from_canonical_rows(rows, 5, 3, vec!["x1".into(), "x2".into()])
                .unwrap();
        let mut spec = lmm_spec(RandomEffects::Cluster);
        spec.covariates = vec![
            CovariateTerm::Named("x1".into()),
            CovariateTerm::Named("x2".into()),
        ];
        assert!(matches!(
            crate::models::fit_lmm(&data, &spec),
            Err(Error::RankDeficientDesign(_))
        ));
    }
}
