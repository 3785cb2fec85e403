//! Design matrices and per-cell sufficient statistics for the working
//! models.
//!
//! Fixed effects are laid out as `[period effects β_1..β_J | treatment
//! coefficient(s) | covariate coefficients]` with no global intercept. Under
//! a period-specific treatment effect the reported coefficients are τ_2..τ_J;
//! a τ_j column is only *active* (enters the solve) when period j contains
//! both arms. In a complete stepped wedge the final period is fully treated,
//! so the τ_J column coincides with the period-J indicator and is reported
//! as 0 with `aliased = true`; rollout-period predictions never use it.
//!
//! Per-cell sufficient statistics (Σx, Σxx', Σxy, Σy, Σy², n over the cell's
//! rows) are precomputed once per (dataset, spec) so that leave-one-cluster-
//! out refits cost nothing to set up: a fit over a subset just skips the
//! excluded cluster's cells.

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};

use super::{CovariateTerm, TreatmentEffect, WorkingModelSpec};

/// Where each active design column comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColumnRole {
    Period(usize),
    /// Constant treatment effect.
    Treat,
    /// Period-specific treatment effect for this period.
    TreatPeriod(usize),
    Covariate(usize),
    /// Treatment-by-covariate interaction (ANCOVA-III only).
    Interaction(usize),
}

/// Sufficient statistics of one nonempty (cluster, period) cell.
#[derive(Debug, Clone)]
pub struct CellStats {
    pub cluster: usize,
    pub period: usize,
    pub treated: bool,
    pub n: usize,
    pub row_start: usize,
    /// Σ_k x_k
    pub sx: DVector<f64>,
    /// Σ_k x_k x_k'
    pub sxx: DMatrix<f64>,
    /// Σ_k x_k y_k
    pub sxy: DVector<f64>,
    /// Σ_k y_k
    pub sy: f64,
    /// Σ_k y_k²
    pub syy: f64,
}

/// A prepared model: active design matrix, outcomes, and cell statistics.
pub struct ModelFrame {
    pub spec: WorkingModelSpec,
    pub n_periods: usize,
    pub n_clusters: usize,
    /// Active columns (aliased treatment periods excluded).
    pub roles: Vec<ColumnRole>,
    /// Periods whose τ_j is aliased with the period effect (reported as 0).
    pub aliased_treat_periods: Vec<usize>,
    /// Row-major n x p design matrix over all rows of the dataset.
    x: Vec<f64>,
    pub y: Vec<f64>,
    pub cells: Vec<CellStats>,
    /// Resolved covariate sources, in spec order.
    pub cov_sources: Vec<CovSource>,
}

#[derive(Debug, Clone, Copy)]
pub enum CovSource {
    Column(usize),
    CellSize,
}

impl ModelFrame {
    pub fn p(&self) -> usize {
        self.roles.len()
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let p = self.roles.len();
        &self.x[r * p..(r + 1) * p]
    }

    /// Build the frame for a dataset and spec, resolving covariate names.
    pub fn new(data: &TrialDataset, spec: &WorkingModelSpec) -> Result<ModelFrame> {
        spec.validate()?;
        if spec.family == super::Family::Binomial && !data.outcomes_are_binary() {
            return Err(Error::InvalidSpec(
                "binomial family requires 0/1 outcomes".into(),
            ));
        }
        let n_j = data.n_periods();
        let n_i = data.n_clusters();

        let cov_sources: Vec<CovSource> = spec
            .covariates
            .iter()
            .map(|t| match t {
                CovariateTerm::CellSize => Ok(CovSource::CellSize),
                CovariateTerm::Named(name) => data
                    .covariate_index(name)
                    .map(CovSource::Column)
                    .ok_or_else(|| Error::MissingColumn(name.clone())),
            })
            .collect::<Result<_>>()?;

        // A τ_j column is identifiable only when period j has both arms.
        let mut has_treated = vec![false; n_j + 1];
        let mut has_control = vec![false; n_j + 1];
        for i in 0..n_i {
            for j in 1..=n_j {
                if data.cell_size(i, j) > 0 {
                    if data.cell_treatment(i, j) == 1 {
                        has_treated[j] = true;
                    } else {
                        has_control[j] = true;
                    }
                }
            }
        }

        let mut roles: Vec<ColumnRole> = (1..=n_j).map(ColumnRole::Period).collect();
        let mut aliased = Vec::new();
        match spec.treatment_effect {
            TreatmentEffect::Constant => {
                // identifiable only when both arms appear somewhere
                let any_t = (1..=n_j).any(|j| has_treated[j]);
                let any_c = (1..=n_j).any(|j| has_control[j]);
                if any_t && any_c {
                    roles.push(ColumnRole::Treat);
                } else {
                    aliased.push(0);
                }
            }
            TreatmentEffect::PeriodSpecific => {
                for j in 2..=n_j {
                    if has_treated[j] && has_control[j] {
                        roles.push(ColumnRole::TreatPeriod(j));
                    } else if has_treated[j] {
                        aliased.push(j);
                    }
                    // a period with no treated cells contributes no column
                }
            }
        }
        for k in 0..cov_sources.len() {
            roles.push(ColumnRole::Covariate(k));
        }
        if spec.ancova_interactions {
            for k in 0..cov_sources.len() {
                roles.push(ColumnRole::Interaction(k));
            }
        }

        let p = roles.len();
        let n = data.n_rows();
        let mut x = vec![0.0; n * p];
        let mut y = vec![0.0; n];
        let mut cells = Vec::new();

        for i in 0..n_i {
            for j in 1..=n_j {
                let range = data.cell_range(i, j);
                if range.is_empty() {
                    continue;
                }
                let z = data.cell_treatment(i, j) == 1;
                let mut sx = DVector::zeros(p);
                let mut sxx = DMatrix::zeros(p, p);
                let mut sxy = DVector::zeros(p);
                let mut sy = 0.0;
                let mut syy = 0.0;
                for r in range.clone() {
                    let rec = &data.rows()[r];
                    let xr = &mut x[r * p..(r + 1) * p];
                    for (c, role) in roles.iter().enumerate() {
                        xr[c] = match role {
                            ColumnRole::Period(pj) => f64::from(*pj == j),
                            ColumnRole::Treat => f64::from(z),
                            ColumnRole::TreatPeriod(pj) => f64::from(z && *pj == j),
                            ColumnRole::Covariate(k) | ColumnRole::Interaction(k) => {
                                let v = match cov_sources[*k] {
                                    CovSource::Column(ci) => rec.covariates[ci],
                                    CovSource::CellSize => range.len() as f64,
                                };
                                if matches!(role, ColumnRole::Interaction(_)) {
                                    if z {
                                        v
                                    } else {
                                        0.0
                                    }
                                } else {
                                    v
                                }
                            }
                        };
                    }
                    y[r] = rec.outcome;
                    let yv = rec.outcome;
                    sy += yv;
                    syy += yv * yv;
                    for a in 0..p {
                        let xa = xr[a];
                        if xa == 0.0 {
                            continue;
                        }
                        sx[a] += xa;
                        sxy[a] += xa * yv;
                        for b in 0..=a {
                            sxx[(a, b)] += xa * xr[b];
                        }
                    }
                }
                // mirror the lower triangle
                for a in 0..p {
                    for b in (a + 1)..p {
                        sxx[(a, b)] = sxx[(b, a)];
                    }
                }
                cells.push(CellStats {
                    cluster: i,
                    period: j,
                    treated: z,
                    n: range.len(),
                    row_start: range.start,
                    sx,
                    sxx,
                    sxy,
                    sy,
                    syy,
                });
            }
        }

        Ok(ModelFrame {
            spec: spec.clone(),
            n_periods: n_j,
            n_clusters: n_i,
            roles,
            aliased_treat_periods: aliased,
            x,
            y,
            cells,
            cov_sources,
        })
    }

    /// Totals of X'X etc. over a cluster subset (independence weights).
    pub fn normal_equations(&self, subset: &ClusterSubset) -> (DMatrix<f64>, DVector<f64>, f64, usize) {
        let p = self.p();
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        let mut n = 0usize;
        for cell in &self.cells {
            if !subset.contains(cell.cluster) {
                continue;
            }
            xtx += &cell.sxx;
            xty += &cell.sxy;
            yty += cell.syy;
            n += cell.n;
        }
        (xtx, xty, yty, n)
    }

    /// Linear predictor of one data row under the fitted coefficients.
    pub fn eta_row(&self, row: usize, coef: &DVector<f64>) -> f64 {
        let xr = self.row(row);
        let mut eta = 0.0;
        for (c, &v) in xr.iter().enumerate() {
            if v != 0.0 {
                eta += v * coef[c];
            }
        }
        eta
    }

    /// Expand active coefficients into the reported layout
    /// `[β_1..β_J | τ (or τ_2..τ_J) | γ_1..γ_m (| interactions)]`,
    /// inserting zeros for aliased treatment periods.
    pub fn expand_coefficients(&self, active: &DVector<f64>) -> DVector<f64> {
        let n_j = self.n_periods;
        let m = self.cov_sources.len();
        let t_slots = match self.spec.treatment_effect {
            TreatmentEffect::Constant => 1,
            TreatmentEffect::PeriodSpecific => n_j - 1,
        };
        let inter = if self.spec.ancova_interactions { m } else { 0 };
        let mut full = DVector::zeros(n_j + t_slots + m + inter);
        for (c, role) in self.roles.iter().enumerate() {
            let slot = match role {
                ColumnRole::Period(j) => j - 1,
                ColumnRole::Treat => n_j,
                ColumnRole::TreatPeriod(j) => n_j + (j - 2),
                ColumnRole::Covariate(k) => n_j + t_slots + k,
                ColumnRole::Interaction(k) => n_j + t_slots + m + k,
            };
            full[slot] = active[c];
        }
        full
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use crate::models::{EstimatorKind, Family, Link, RandomEffects};

    fn wedge(n_i: usize, n_j: usize, per_cell: usize) -> TrialDataset {
        let mut rows = Vec::new();
        for i in 0..n_i {
            let a = 2 + i * (n_j - 1) / n_i;
            for j in 1..=n_j {
                for k in 0..per_cell {
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: u8::from(j >= a),
                        outcome: (i + j + k) as f64 * 0.5,
                        covariates: vec![k as f64, 1.0 - (i as f64)],
                    });
                }
            }
        }
        TrialDataset::from_canonical_rows(rows, n_i, n_j, vec!["x1".into(), "x2".into()])
            .unwrap()
    }

    #[test]
    fn period_specific_last_period_is_aliased() {
        let data = wedge(4, 4, 3);
        let spec = WorkingModelSpec {
            family: Family::Gaussian,
            link: Link::Identity,
            treatment_effect: TreatmentEffect::PeriodSpecific,
            random_effects: RandomEffects::None,
            covariates: vec![CovariateTerm::Named("x1".into())],
            estimator: EstimatorKind::GeeIndependence,
            ancova_interactions: false,
        };
        let frame = ModelFrame::new(&data, &spec).unwrap();
        assert_eq!(frame.aliased_treat_periods, vec![4]);
        // active columns: 4 periods + τ_2, τ_3 + 1 covariate
        assert_eq!(frame.p(), 4 + 2 + 1);
        let full = frame.expand_coefficients(&DVector::from_element(frame.p(), 1.0));
        // layout: β1..β4, τ2, τ3, τ4(=0 aliased), γ1
        assert_eq!(full.len(), 4 + 3 + 1);
        assert_eq!(full[6], 0.0);
        assert_eq!(full[7], 1.0);
    }

    #[test]
    fn cell_stats_match_direct_sums() {
        let data = wedge(3, 3, 4);
        let spec = WorkingModelSpec {
            family: Family::Gaussian,
            link: Link::Identity,
            treatment_effect: TreatmentEffect::Constant,
            random_effects: RandomEffects::None,
            covariates: vec![
                CovariateTerm::Named("x2".into()),
                CovariateTerm::CellSize,
            ],
            estimator: EstimatorKind::GeeIndependence,
            ancova_interactions: false,
        };
        let frame = ModelFrame::new(&data, &spec).unwrap();
        let (xtx, xty, _, n) = frame.normal_equations(&ClusterSubset::full(3));
        assert_eq!(n, 36);
        // recompute X'X directly from rows
        let p = frame.p();
        let mut direct = DMatrix::zeros(p, p);
        let mut direct_y = DVector::zeros(p);
        for r in 0..frame.n_rows() {
            let xr = frame.row(r);
            for a in 0..p {
                direct_y[a] += xr[a] * frame.y[r];
                for b in 0..p {
                    direct[(a, b)] += xr[a] * xr[b];
                }
            }
        }
        assert!((&xtx - &direct).abs().max() < 1e-10);
        assert!((&xty - &direct_y).abs().max() < 1e-10);
    }
}
