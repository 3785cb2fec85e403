//! Weighted-least-squares ANCOVA working model.
//!
//! `Y_ijk = β_j + τ_j Z_ij + X̃_ijk'γ (+ Z_ij X̃_ijk'ξ) + ε` fitted by WLS
//! with the scheme's individual weights ω_ijk, where X̃ centers each
//! covariate at its ω-weighted period mean. The interaction columns are the
//! "ANCOVA-III" variant; without them this is the main-effects ("ANCOVA-I")
//! model whose standardized estimator coincides with the weighted
//! difference-in-means of covariate-adjusted outcomes, period by period.
//!
//! The centering constants are kept on the fitted model so that predictions
//! evaluate the same centered design. Within-cell weights of the named
//! schemes are constant, so cell-level covariate means need no reweighting.

use nalgebra::{Cholesky, DMatrix, DVector};
use std::sync::Arc;

use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};
use crate::weights::WeightScheme;

use super::design::{ColumnRole, CovSource, ModelFrame};
use super::{AncovaCentering, Convergence, FittedModel, VarianceComponents};

pub fn fit_ancova_wls(
    data: &TrialDataset,
    frame: &Arc<ModelFrame>,
    subset: &ClusterSubset,
    scheme: &WeightScheme,
) -> Result<FittedModel> {
    frame.spec.validate()?;
    let p = frame.p();
    let n_j = frame.n_periods;
    let m = frame.cov_sources.len();

    // ω-weighted period means of each covariate over included rows.
    let mut num = vec![0.0; n_j * m];
    let mut den = vec![0.0; n_j];
    for cell in &frame.cells {
        if !subset.contains(cell.cluster) {
            continue;
        }
        let j = cell.period;
        for r in cell.row_start..cell.row_start + cell.n {
            let w = scheme.row(r);
            den[j - 1] += w;
            let rec = &data.rows()[r];
            for (k, src) in frame.cov_sources.iter().enumerate() {
                let v = match src {
                    CovSource::Column(ci) => rec.covariates[*ci],
                    CovSource::CellSize => cell.n as f64,
                };
                num[(j - 1) * m + k] += w * v;
            }
        }
    }
    let mut period_means = vec![0.0; n_j * m];
    for j in 0..n_j {
        for k in 0..m {
            period_means[j * m + k] = if den[j] > 0.0 {
                num[j * m + k] / den[j]
            } else {
                0.0
            };
        }
    }
    let centering = AncovaCentering {
        period_means,
        n_covariates: m,
    };

    // Weighted normal equations over the centered design.
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut xt = vec![0.0; p];
    for cell in &frame.cells {
        if !subset.contains(cell.cluster) {
            continue;
        }
        let j = cell.period;
        let z = f64::from(cell.treated);
        for r in cell.row_start..cell.row_start + cell.n {
            let w = scheme.row(r);
            if w == 0.0 {
                continue;
            }
            let raw = frame.row(r);
            for (c, role) in frame.roles.iter().enumerate() {
                xt[c] = match role {
                    ColumnRole::Covariate(k) => raw[c] - centering.mean(j, *k),
                    ColumnRole::Interaction(k) => raw[c] - z * centering.mean(j, *k),
                    _ => raw[c],
                };
            }
            let y = frame.y[r];
            for c in 0..p {
                let xc = xt[c];
                if xc == 0.0 {
                    continue;
                }
                b[c] += w * xc * y;
                for d in 0..=c {
                    a[(c, d)] += w * xc * xt[d];
                }
            }
        }
    }
    for c in 0..p {
        for d in (c + 1)..p {
            a[(c, d)] = a[(d, c)];
        }
    }
    let chol = Cholesky::new(a).ok_or_else(|| {
        Error::RankDeficientDesign("weighted centered design is rank deficient".into())
    })?;
    let beta = chol.solve(&b);

    Ok(FittedModel {
        spec: frame.spec.clone(),
        coef: frame.expand_coefficients(&beta),
        vc: VarianceComponents::none(),
        convergence: Convergence::exact(),
        frame: frame.clone(),
        active_coef: beta,
        centering: Some(centering),
        beta_cov: None,
    })
}
