//! Binomial mixed models by Laplace-approximate maximum likelihood.
//!
//! Random effects are a cluster intercept α_i plus (optionally) one
//! intercept per observed cluster-period cell, all independent gaussians.
//! Integrating them out cluster by cluster, the approximate -2 log
//! marginal likelihood is
//!
//! ```text
//! Σ_i [ -2 ℓ_i(β, û_i) + û_i' D⁻¹ û_i + log|D_i| + log|H_i| ],
//! ```
//!
//! where û_i is the per-cluster posterior mode (found by damped Newton on
//! the penalized log-likelihood, exploiting the arrow structure of the
//! Hessian) and `H_i = Z'WZ + D⁻¹` is evaluated at the mode.
//!
//! The fit proceeds in two stages: a simplex search over the log variance
//! components with (β, u) profiled out by penalized IRLS, then a
//! quasi-Newton polish over (β, log variance components) jointly so the
//! reported optimum is a genuine stationary point of the Laplace objective.

use nalgebra::{Cholesky, DMatrix, DVector};
use std::sync::Arc;

use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};

use super::design::ModelFrame;
use super::family::Family;
use super::optim::{bfgs, nelder_mead, Trace};
use super::{Convergence, FittedModel, RandomEffects, VarianceComponents};

const INNER_TOL: f64 = 1e-9;
const INNER_MAX: usize = 100;
const LOG_VC_MIN: f64 = -30.0;
const LOG_VC_MAX: f64 = 8.0;
const BOUNDARY_VC: f64 = 1e-10;

/// Per-cluster view: indices of this cluster's cells within the frame.
struct ClusterBlock {
    cluster: usize,
    cells: std::ops::Range<usize>,
    /// Random-effect dimension: 1 + #cells when cell effects are present.
    q: usize,
}

fn cluster_blocks(frame: &ModelFrame, nested: bool) -> Vec<ClusterBlock> {
    let mut blocks = Vec::new();
    let cells = &frame.cells;
    let mut idx = 0;
    while idx < cells.len() {
        let cluster = cells[idx].cluster;
        let mut end = idx;
        while end < cells.len() && cells[end].cluster == cluster {
            end += 1;
        }
        blocks.push(ClusterBlock {
            cluster,
            cells: idx..end,
            q: if nested { 1 + (end - idx) } else { 1 },
        });
        idx = end;
    }
    blocks
}

struct InnerResult {
    /// -2 ℓ_i(β, û) + û'D⁻¹û
    penalized_m2: f64,
    /// log|H_i| at the mode.
    logdet_h: f64,
}

/// Damped Newton for one cluster's random-effect mode. `u` is updated in
/// place and reused as a warm start across objective evaluations.
#[allow(clippy::too_many_arguments)]
fn inner_mode(
    frame: &ModelFrame,
    block: &ClusterBlock,
    beta: &DVector<f64>,
    tau_a2: f64,
    tau_g2: f64,
    nested: bool,
    u: &mut [f64],
    label: &str,
) -> Result<InnerResult> {
    let (family, link) = (frame.spec.family, frame.spec.link);
    let m = block.cells.len();
    let inv_a = 1.0 / tau_a2;
    let inv_g = if nested { 1.0 / tau_g2 } else { 0.0 };

    let penalized = |u: &[f64]| -> f64 {
        let mut ll = 0.0;
        for (ci, cell) in frame.cells[block.cells.clone()].iter().enumerate() {
            let off = u[0] + if nested { u[1 + ci] } else { 0.0 };
            for r in cell.row_start..cell.row_start + cell.n {
                let eta = frame.eta_row(r, beta) + off;
                ll += family.loglik(frame.y[r], link.inv(eta));
            }
        }
        let mut pen = u[0] * u[0] * inv_a;
        if nested {
            for ui in &u[1..] {
                pen += ui * ui * inv_g;
            }
        }
        -2.0 * ll + pen
    };

    let mut f = penalized(u);
    let mut grad = vec![0.0; block.q];
    let mut h_b = vec![0.0; m]; // H[0, 1+c]
    let mut h_d = vec![0.0; m]; // H[1+c, 1+c]
    for iter in 0..INNER_MAX {
        // gradient of the penalized -2 loglik and Fisher Hessian
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut h_a = inv_a;
        h_b.iter_mut().for_each(|v| *v = 0.0);
        for (ci, cell) in frame.cells[block.cells.clone()].iter().enumerate() {
            let off = u[0] + if nested { u[1 + ci] } else { 0.0 };
            let mut s_sum = 0.0;
            let mut w_sum = 0.0;
            for r in cell.row_start..cell.row_start + cell.n {
                let eta = frame.eta_row(r, beta) + off;
                let mu = link.inv(eta);
                let dmu = link.mu_eta(eta);
                let var = family.variance(mu);
                s_sum += (frame.y[r] - mu) * dmu / var;
                w_sum += dmu * dmu / var;
            }
            grad[0] += -2.0 * s_sum;
            h_a += w_sum;
            if nested {
                grad[1 + ci] = -2.0 * s_sum + 2.0 * u[1 + ci] * inv_g;
                h_b[ci] = w_sum;
                h_d[ci] = w_sum + inv_g;
            }
        }
        grad[0] += 2.0 * u[0] * inv_a;
        // gradient here is of the *penalized -2 loglik*, Hessian is 2*(Z'WZ+D⁻¹);
        // the factor 2 cancels in the Newton step if applied consistently.
        let gnorm = grad.iter().fold(0.0f64, |mx, &g| mx.max(g.abs()));
        if gnorm < INNER_TOL * (1.0 + f.abs()) {
            break;
        }
        // solve (arrow structure) H Δ = g/2
        let mut schur = h_a;
        let mut rhs0 = grad[0] / 2.0;
        let mut step = vec![0.0; block.q];
        if nested {
            for ci in 0..m {
                schur -= h_b[ci] * h_b[ci] / h_d[ci];
                rhs0 -= h_b[ci] / h_d[ci] * (grad[1 + ci] / 2.0);
            }
        }
        if schur <= 0.0 || !schur.is_finite() {
            return Err(Error::InnerNewtonDivergence(label.to_string()));
        }
        step[0] = rhs0 / schur;
        if nested {
            for ci in 0..m {
                step[1 + ci] = (grad[1 + ci] / 2.0 - h_b[ci] * step[0]) / h_d[ci];
            }
        }
        // step halving on the penalized objective
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = u.iter().zip(&step).map(|(&ui, &si)| ui - t * si).collect();
            let fc = penalized(&cand);
            if fc <= f + 1e-12 {
                u.copy_from_slice(&cand);
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        if iter_limit_exceeded(u) || iter == INNER_MAX - 1 {
            return Err(Error::InnerNewtonDivergence(label.to_string()));
        }
    }

    // log|H| with H = Z'WZ + D⁻¹ at the mode
    let mut h_a = inv_a;
    h_b.iter_mut().for_each(|v| *v = 0.0);
    for (ci, cell) in frame.cells[block.cells.clone()].iter().enumerate() {
        let off = u[0] + if nested { u[1 + ci] } else { 0.0 };
        let mut w_sum = 0.0;
        for r in cell.row_start..cell.row_start + cell.n {
            let eta = frame.eta_row(r, beta) + off;
            let mu = link.inv(eta);
            let dmu = link.mu_eta(eta);
            w_sum += dmu * dmu / family.variance(mu);
        }
        h_a += w_sum;
        if nested {
            h_b[ci] = w_sum;
            h_d[ci] = w_sum + inv_g;
        }
    }
    let mut logdet = 0.0;
    let mut schur = h_a;
    if nested {
        for ci in 0..m {
            logdet += h_d[ci].ln();
            schur -= h_b[ci] * h_b[ci] / h_d[ci];
        }
    }
    if schur <= 0.0 {
        return Err(Error::InnerNewtonDivergence(label.to_string()));
    }
    logdet += schur.ln();
    Ok(InnerResult {
        penalized_m2: f,
        logdet_h: logdet,
    })
}

fn iter_limit_exceeded(u: &[f64]) -> bool {
    u.iter().any(|v| !v.is_finite() || v.abs() > 1e4)
}

struct LaplaceState {
    /// Warm-started per-cluster modes.
    modes: Vec<Vec<f64>>,
}

/// The Laplace -2 log marginal likelihood at (β, τ_α², τ_γ²).
fn laplace_m2ll(
    frame: &ModelFrame,
    blocks: &[ClusterBlock],
    subset: &ClusterSubset,
    labels: &[String],
    beta: &DVector<f64>,
    tau_a2: f64,
    tau_g2: f64,
    nested: bool,
    state: &mut LaplaceState,
) -> Result<f64> {
    let mut total = 0.0;
    for (bi, block) in blocks.iter().enumerate() {
        if !subset.contains(block.cluster) {
            continue;
        }
        let inner = inner_mode(
            frame,
            block,
            beta,
            tau_a2,
            tau_g2,
            nested,
            &mut state.modes[bi],
            &labels[block.cluster],
        )?;
        let m = block.cells.len();
        let logdet_d = tau_a2.ln() + if nested { m as f64 * tau_g2.ln() } else { 0.0 };
        total += inner.penalized_m2 + logdet_d + inner.logdet_h;
    }
    Ok(total)
}

/// One Fisher-scoring step for β with the random effects held at their
/// modes (the β half of penalized IRLS).
fn beta_step(
    frame: &ModelFrame,
    blocks: &[ClusterBlock],
    subset: &ClusterSubset,
    beta: &DVector<f64>,
    state: &LaplaceState,
    nested: bool,
) -> Result<DVector<f64>> {
    let p = frame.p();
    let (family, link) = (frame.spec.family, frame.spec.link);
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwt = DVector::zeros(p);
    for (bi, block) in blocks.iter().enumerate() {
        if !subset.contains(block.cluster) {
            continue;
        }
        let u = &state.modes[bi];
        for (ci, cell) in frame.cells[block.cells.clone()].iter().enumerate() {
            let off = u[0] + if nested { u[1 + ci] } else { 0.0 };
            for r in cell.row_start..cell.row_start + cell.n {
                let xr = frame.row(r);
                let eta = frame.eta_row(r, beta) + off;
                let mu = link.inv(eta);
                let dmu = link.mu_eta(eta).max(1e-10);
                let w = dmu * dmu / family.variance(mu);
                // working target excludes the random-effect offset
                let t = (eta - off) + (frame.y[r] - mu) / dmu;
                for a in 0..p {
                    let xa = xr[a];
                    if xa == 0.0 {
                        continue;
                    }
                    xtwt[a] += w * xa * t;
                    for b in 0..=a {
                        xtwx[(a, b)] += w * xa * xr[b];
                    }
                }
            }
        }
    }
    for a in 0..p {
        for b in (a + 1)..p {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let chol = Cholesky::new(xtwx)
        .ok_or_else(|| Error::RankDeficientDesign("X'WX not positive definite".into()))?;
    Ok(chol.solve(&xtwt))
}

pub fn fit_glmm_laplace_on(
    data: &TrialDataset,
    frame: &Arc<ModelFrame>,
    subset: &ClusterSubset,
) -> Result<FittedModel> {
    frame.spec.validate()?;
    if frame.spec.family != Family::Binomial {
        return Err(Error::InvalidSpec(
            "GLMM_LAPLACE requires the binomial family".into(),
        ));
    }
    let nested = frame.spec.random_effects == RandomEffects::ClusterPlusClusterPeriod;
    let blocks = cluster_blocks(frame, nested);
    let labels: Vec<String> = data.cluster_labels().to_vec();
    let p = frame.p();

    // Stage 0: independence start for β.
    let start_fit = super::gee::fit_gee_independence_on(frame, subset)?;
    let mut beta = start_fit.active_coef.clone();

    let mut state = LaplaceState {
        modes: blocks.iter().map(|b| vec![0.0; b.q]).collect(),
    };
    let n_vc = if nested { 2 } else { 1 };
    let mut trace = Trace::default();

    // Stage 1: simplex over log variance components with (β, u) profiled
    // by penalized IRLS.
    let profile = |log_vc: &[f64],
                   beta: &mut DVector<f64>,
                   state: &mut LaplaceState|
     -> Result<f64> {
        let ta = log_vc[0].clamp(LOG_VC_MIN, LOG_VC_MAX).exp();
        let tg = if nested {
            log_vc[1].clamp(LOG_VC_MIN, LOG_VC_MAX).exp()
        } else {
            1.0
        };
        for _ in 0..50 {
            // refresh modes at current β
            laplace_m2ll(frame, &blocks, subset, &labels, beta, ta, tg, nested, state)?;
            let new_beta = beta_step(frame, &blocks, subset, beta, state, nested)?;
            let change = (&new_beta - &*beta).amax() / (1.0 + beta.amax());
            *beta = new_beta;
            if change < 1e-8 {
                break;
            }
        }
        laplace_m2ll(frame, &blocks, subset, &labels, beta, ta, tg, nested, state)
    };

    let best_vc;
    {
        let beta_cell = std::cell::RefCell::new(&mut beta);
        let state_cell = std::cell::RefCell::new(&mut state);
        let objective = |x: &[f64]| -> f64 {
            let mut b = beta_cell.borrow_mut();
            let mut s = state_cell.borrow_mut();
            profile(x, &mut b, &mut s).unwrap_or(f64::INFINITY)
        };
        best_vc = nelder_mead(objective, &vec![(0.2f64).ln(); n_vc], 1.0, 80, 1e-10, &mut trace);
        // leave β and the modes at the best vertex (propagating any failure)
        let mut b = beta_cell.borrow_mut();
        let mut s = state_cell.borrow_mut();
        profile(&best_vc, &mut b, &mut s)?;
    }

    // Stage 2: joint quasi-Newton polish over (β, log vc).
    let mut joint: Vec<f64> = beta.iter().copied().collect();
    joint.extend(best_vc.iter().copied());

    let scaled_tol = |f: f64| 1e-6 * (1.0 + f.abs() / 1000.0);
    let (opt, objective_value, grad_norm, polish_iters);
    {
        let state_cell = std::cell::RefCell::new(&mut state);
        let objective = |x: &[f64]| -> f64 {
            let b = DVector::from_column_slice(&x[..p]);
            let ta = x[p].clamp(LOG_VC_MIN, LOG_VC_MAX).exp();
            let tg = if nested {
                x[p + 1].clamp(LOG_VC_MIN, LOG_VC_MAX).exp()
            } else {
                1.0
            };
            let mut s = state_cell.borrow_mut();
            laplace_m2ll(frame, &blocks, subset, &labels, &b, ta, tg, nested, &mut s)
                .unwrap_or(f64::INFINITY)
        };
        let (x, fx, g, it) = bfgs(objective, &joint, 1e-6, scaled_tol, 60, &mut trace);
        opt = x;
        objective_value = fx;
        grad_norm = g;
        polish_iters = it;
    }
    let _ = polish_iters;

    let beta_final = DVector::from_column_slice(&opt[..p]);
    let tau_a2 = opt[p].clamp(LOG_VC_MIN, LOG_VC_MAX).exp();
    let tau_g2 = if nested {
        opt[p + 1].clamp(LOG_VC_MIN, LOG_VC_MAX).exp()
    } else {
        0.0
    };
    let boundary = tau_a2 < BOUNDARY_VC || (nested && tau_g2 < BOUNDARY_VC);
    let converged = grad_norm <= scaled_tol(objective_value);
    if !converged && grad_norm > 1e-3 * (1.0 + objective_value.abs() / 1000.0) {
        return Err(Error::OptimizerNonConvergence {
            max_iter: trace.evaluations,
            grad_norm,
        });
    }

    // refresh modes at the optimum, then model-based covariance of β
    laplace_m2ll(
        frame,
        &blocks,
        subset,
        &labels,
        &beta_final,
        tau_a2,
        if nested { tau_g2 } else { 1.0 },
        nested,
        &mut state,
    )?;
    let beta_cov = model_based_cov(
        frame, &blocks, subset, &beta_final, &state, tau_a2, tau_g2, nested,
    );

    let coef = frame.expand_coefficients(&beta_final);
    Ok(FittedModel {
        spec: frame.spec.clone(),
        coef,
        vc: VarianceComponents {
            cluster: tau_a2,
            cell: tau_g2,
            residual: 0.0,
        },
        convergence: Convergence {
            iterations: trace.evaluations,
            objective: objective_value,
            grad_norm,
            converged,
            boundary,
            accepted_objectives: trace.accepted,
        },
        frame: frame.clone(),
        active_coef: beta_final,
        centering: None,
        beta_cov,
    })
}

/// Var(β̂) ≈ [Σ_i X'WX − X'WZ (Z'WZ + D⁻¹)⁻¹ Z'WX]⁻¹ at the mode.
#[allow(clippy::too_many_arguments)]
fn model_based_cov(
    frame: &ModelFrame,
    blocks: &[ClusterBlock],
    subset: &ClusterSubset,
    beta: &DVector<f64>,
    state: &LaplaceState,
    tau_a2: f64,
    tau_g2: f64,
    nested: bool,
) -> Option<DMatrix<f64>> {
    let p = frame.p();
    let (family, link) = (frame.spec.family, frame.spec.link);
    let mut info = DMatrix::zeros(p, p);
    for (bi, block) in blocks.iter().enumerate() {
        if !subset.contains(block.cluster) {
            continue;
        }
        let u = &state.modes[bi];
        let q = block.q;
        let mut xwx = DMatrix::zeros(p, p);
        let mut xwz = DMatrix::zeros(p, q);
        let mut zwz = DMatrix::zeros(q, q);
        zwz[(0, 0)] = 1.0 / tau_a2;
        if nested {
            for c in 1..q {
                zwz[(c, c)] = 1.0 / tau_g2;
            }
        }
        for (ci, cell) in frame.cells[block.cells.clone()].iter().enumerate() {
            let off = u[0] + if nested { u[1 + ci] } else { 0.0 };
            for r in cell.row_start..cell.row_start + cell.n {
                let xr = frame.row(r);
                let eta = frame.eta_row(r, beta) + off;
                let mu = link.inv(eta);
                let dmu = link.mu_eta(eta);
                let w = dmu * dmu / family.variance(mu);
                for a in 0..p {
                    let xa = xr[a];
                    if xa == 0.0 {
                        continue;
                    }
                    for b in 0..=a {
                        xwx[(a, b)] += w * xa * xr[b];
                    }
                    xwz[(a, 0)] += w * xa;
                    if nested {
                        xwz[(a, 1 + ci)] += w * xa;
                    }
                }
                zwz[(0, 0)] += w;
                if nested {
                    zwz[(0, 1 + ci)] += w;
                    zwz[(1 + ci, 0)] += w;
                    zwz[(1 + ci, 1 + ci)] += w;
                }
            }
        }
        for a in 0..p {
            for b in (a + 1)..p {
                xwx[(a, b)] = xwx[(b, a)];
            }
        }
        let hinv = Cholesky::new(zwz)?;
        let solved = hinv.solve(&xwz.transpose());
        info += xwx - &xwz * solved;
    }
    Cholesky::new(info).map(|c| c.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use crate::models::{
        CovariateTerm, EstimatorKind, Link, TreatmentEffect, WorkingModelSpec,
    };
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn glmm_spec(re: RandomEffects) -> WorkingModelSpec {
        WorkingModelSpec {
            family: Family::Binomial,
            link: Link::Logit,
            treatment_effect: TreatmentEffect::Constant,
            random_effects: re,
            covariates: vec![CovariateTerm::Named("x1".into())],
            estimator: EstimatorKind::GlmmLaplace,
            ancova_interactions: false,
        }
    }

    fn binary_trial(seed: u64, n_i: usize, n_j: usize, n: usize, tau_a: f64) -> TrialDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for i in 0..n_i {
            let a = 2 + i % (n_j - 1);
            let alpha: f64 = tau_a * rng.sample::<f64, _>(StandardNormal);
            for j in 1..=n_j {
                let z = u8::from(j >= a);
                for _ in 0..n {
                    let x: f64 = rng.sample(StandardNormal);
                    let eta = -0.5 + 0.15 * j as f64 + 0.8 * f64::from(z) + 0.5 * x + alpha;
                    let p = super::super::family::expit(eta);
                    let y = f64::from(rng.random::<f64>() < p);
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
    fn near_zero_variance_matches_independence_gee() {
        // With the cluster variance forced to ~0 the Laplace fit collapses
        // to the independence fit.
        let data = binary_trial(41, 12, 4, 30, 0.0);
        let spec = glmm_spec(RandomEffects::Cluster);
        let glmm = crate::models::fit_glmm_laplace(&data, &spec).unwrap();
        let mut gee_spec = spec.clone();
        gee_spec.estimator = EstimatorKind::GeeIndependence;
        gee_spec.random_effects = RandomEffects::None;
        let gee = crate::models::fit_gee_independence(&data, &gee_spec).unwrap();
        assert!(
            glmm.vc.cluster < 0.05,
            "cluster vc should be near boundary: {}",
            glmm.vc.cluster
        );
        for c in 0..glmm.active_coef.len() {
            assert!(
                (glmm.active_coef[c] - gee.active_coef[c]).abs() < 5e-2,
                "coef {c}: {} vs {}",
                glmm.active_coef[c],
                gee.active_coef[c]
            );
        }
    }

    #[test]
    fn recovers_treatment_effect_direction() {
        let data = binary_trial(43, 20, 4, 40, 0.5);
        let spec = glmm_spec(RandomEffects::Cluster);
        let fit = crate::models::fit_glmm_laplace(&data, &spec).unwrap();
        let tau = fit.tau_constant().unwrap();
        assert!((tau - 0.8).abs() < 0.4, "τ̂ = {tau}");
        assert!(fit.vc.cluster > 0.01);
        assert!(fit.tau_model_se().is_some());
    }

    #[test]
    fn symmetric_two_point_cluster() {
        // One cluster, two observations {0, 1} in one period: the period
        // effect must be ~0 and the variance component at the boundary.
        let rows = vec![
            IndividualRecord {
                cluster: 0,
                period: 1,
                treatment: 0,
                outcome: 0.0,
                covariates: vec![],
            },
            IndividualRecord {
                cluster: 0,
                period: 1,
                treatment: 0,
                outcome: 1.0,
                covariates: vec![],
            },
        ];
        let data = TrialDataset::from_canonical_rows(rows, 1, 1, vec![]).unwrap();
        let mut spec = glmm_spec(RandomEffects::Cluster);
        spec.covariates.clear();
        let fit = crate::models::fit_glmm_laplace(&data, &spec).unwrap();
        assert!(fit.coef[0].abs() < 1e-3, "intercept {}", fit.coef[0]);
        assert!(fit.vc.cluster < 1e-6, "vc {}", fit.vc.cluster);
    }
}
