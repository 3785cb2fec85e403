//! The four estimand weight schemes.
//!
//! Each scheme assigns an individual-level weight ω_ijk, which aggregates to
//! cell weights ω_ij = Σ_k ω_ijk, period weights ω_j = Σ_i ω_ij, and cluster
//! weights ω_i = Σ_j ω_ij:
//!
//! |          | ω_ijk                | ω_ij                  | target            |
//! |----------|----------------------|-----------------------|-------------------|
//! | h-iATE   | 1                    | N_ij                  | individuals       |
//! | h-cATE   | 1 / Σ_{j=1..J} N_ij  | N_ij / Σ_{j=1..J} N_ij| clusters          |
//! | v-iATE   | 1 / (I μ̂_j)          | N_ij / (I μ̂_j)        | periods           |
//! | v-cATE   | 1 / N_ij             | 1                     | cluster-periods   |
//!
//! The population quantity E[N_ij] in the v-iATE weights is estimated by the
//! plug-in μ̂_j = (1/I) Σ_i N_ij, so the v-iATE weights are data-dependent.
//! Note an asymmetry made explicit here: the h-cATE *estimator* weights use
//! the per-cluster denominator Σ_{j=1..J} N_ij over all periods, while the
//! h-cATE *estimand* display restricts the denominator to rollout periods;
//! both conventions appear in the definitions and we keep the estimator on
//! the all-period form.

use serde::{Deserialize, Serialize};

use crate::data::{ClusterSubset, TrialDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Horizontal individual-average: equal weight per individual.
    HIate,
    /// Horizontal cluster-average: equal weight per cluster.
    HCate,
    /// Vertical individual-average: equal weight per period.
    VIate,
    /// Vertical cluster-average: equal weight per cluster-period.
    VCate,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::HIate,
        SchemeKind::HCate,
        SchemeKind::VIate,
        SchemeKind::VCate,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            SchemeKind::HIate => "h-iate",
            SchemeKind::HCate => "h-cate",
            SchemeKind::VIate => "v-iate",
            SchemeKind::VCate => "v-cate",
        }
    }

    pub fn parse(s: &str) -> Option<SchemeKind> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "h-iate" | "hiate" => Some(SchemeKind::HIate),
            "h-cate" | "hcate" => Some(SchemeKind::HCate),
            "v-iate" | "viate" => Some(SchemeKind::VIate),
            "v-cate" | "vcate" => Some(SchemeKind::VCate),
            _ => None,
        }
    }
}

/// Fully materialized weights for one scheme on one dataset (optionally a
/// cluster subset). Excluded clusters carry zero weight at every level.
#[derive(Debug, Clone)]
pub struct WeightScheme {
    pub kind: Option<SchemeKind>,
    /// ω_ijk aligned with `TrialDataset::rows()`; zero outside the subset.
    row: Vec<f64>,
    /// ω_ij, row-major I x J.
    cell: Vec<f64>,
    /// ω_j, length J.
    period: Vec<f64>,
    /// ω_i, length I.
    cluster: Vec<f64>,
    /// μ̂_j = mean over included clusters of N_ij (used by v-iATE).
    period_size_mean: Vec<f64>,
    n_periods: usize,
}

impl WeightScheme {
    /// ω_ij for cell (i, j) (j is 1-based).
    #[inline]
    pub fn cell(&self, cluster: usize, period: usize) -> f64 {
        self.cell[cluster * self.n_periods + (period - 1)]
    }

    /// ω_j for period j (1-based).
    #[inline]
    pub fn period(&self, period: usize) -> f64 {
        self.period[period - 1]
    }

    /// ω_i for cluster i.
    #[inline]
    pub fn cluster(&self, cluster: usize) -> f64 {
        self.cluster[cluster]
    }

    /// ω_ijk for a row index into `TrialDataset::rows()`.
    #[inline]
    pub fn row(&self, row: usize) -> f64 {
        self.row[row]
    }

    pub fn period_size_mean(&self, period: usize) -> f64 {
        self.period_size_mean[period - 1]
    }

    /// ω-weighted mean outcome of cell (i, j): Σ_k ω_ijk Y_ijk / Σ_k ω_ijk.
    /// With the built-in schemes the within-cell weights are constant, so
    /// this equals the arithmetic cell mean up to rounding.
    pub fn cell_outcome_mean(&self, data: &TrialDataset, cluster: usize, period: usize) -> f64 {
        let range = data.cell_range(cluster, period);
        let mut num = 0.0;
        let mut den = 0.0;
        for (idx, rec) in range.clone().zip(&data.rows()[range]) {
            let w = self.row[idx];
            num += w * rec.outcome;
            den += w;
        }
        num / den
    }

    /// ω-weighted mean of one covariate column over cell (i, j).
    pub fn cell_covariate_mean(
        &self,
        data: &TrialDataset,
        cluster: usize,
        period: usize,
        cov: usize,
    ) -> f64 {
        let range = data.cell_range(cluster, period);
        let mut num = 0.0;
        let mut den = 0.0;
        for (idx, rec) in range.clone().zip(&data.rows()[range]) {
            let w = self.row[idx];
            num += w * rec.covariates[cov];
            den += w;
        }
        num / den
    }

    /// Build a scheme from arbitrary per-row weights; all aggregate levels
    /// are computed so the aggregation identities hold by construction.
    pub fn from_row_weights(data: &TrialDataset, row: Vec<f64>) -> Result<Self> {
        if row.len() != data.n_rows() {
            return Err(Error::InvalidConfig(format!(
                "{} row weights for {} rows",
                row.len(),
                data.n_rows()
            )));
        }
        let (n_i, n_j) = (data.n_clusters(), data.n_periods());
        let mut cell = vec![0.0; n_i * n_j];
        for i in 0..n_i {
            for j in 1..=n_j {
                cell[i * n_j + (j - 1)] = data.cell_range(i, j).map(|k| row[k]).sum();
            }
        }
        let subset = ClusterSubset::full(n_i);
        let (period, cluster, psm) = aggregate(data, &subset, &cell);
        Ok(WeightScheme {
            kind: None,
            row,
            cell,
            period,
            cluster,
            period_size_mean: psm,
            n_periods: n_j,
        })
    }
}

fn aggregate(
    data: &TrialDataset,
    subset: &ClusterSubset,
    cell: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_i, n_j) = (data.n_clusters(), data.n_periods());
    let mut period = vec![0.0; n_j];
    let mut cluster = vec![0.0; n_i];
    for i in subset.iter() {
        for j in 1..=n_j {
            let w = cell[i * n_j + (j - 1)];
            period[j - 1] += w;
            cluster[i] += w;
        }
    }
    let mut psm = vec![0.0; n_j];
    for j in 1..=n_j {
        let total: usize = subset.iter().map(|i| data.cell_size(i, j)).sum();
        psm[j - 1] = total as f64 / subset.len() as f64;
    }
    (period, cluster, psm)
}

/// Materialize one of the named schemes over the full dataset.
pub fn resolve_weights(data: &TrialDataset, kind: SchemeKind) -> Result<WeightScheme> {
    resolve_weights_on(data, kind, &ClusterSubset::full(data.n_clusters()))
}

/// Materialize a named scheme over a cluster subset. All quantities,
/// including the v-iATE plug-in μ̂_j, are recomputed on the reduced sample;
/// excluded clusters get zero weight at every level.
pub fn resolve_weights_on(
    data: &TrialDataset,
    kind: SchemeKind,
    subset: &ClusterSubset,
) -> Result<WeightScheme> {
    let (n_i, n_j) = (data.n_clusters(), data.n_periods());
    let mut row = vec![0.0; data.n_rows()];
    let mut cell = vec![0.0; n_i * n_j];

    // Empty rollout cells are fatal for the vertical schemes, which give
    // every cluster-period positive weight by definition.
    if matches!(kind, SchemeKind::VIate | SchemeKind::VCate) {
        for i in subset.iter() {
            for j in data.rollout_periods() {
                if data.cell_size(i, j) == 0 {
                    return Err(Error::EmptyCell {
                        cluster: data.cluster_labels()[i].clone(),
                        period: j,
                    });
                }
            }
        }
    }

    let psm: Vec<f64> = (1..=n_j)
        .map(|j| {
            let total: usize = subset.iter().map(|i| data.cell_size(i, j)).sum();
            total as f64 / subset.len() as f64
        })
        .collect();

    for i in subset.iter() {
        let cluster_total: usize = (1..=n_j).map(|j| data.cell_size(i, j)).sum();
        if kind == SchemeKind::HCate && cluster_total == 0 {
            return Err(Error::ZeroClusterTotal(data.cluster_labels()[i].clone()));
        }
        for j in 1..=n_j {
            let n_ij = data.cell_size(i, j);
            let w_row = match kind {
                SchemeKind::HIate => 1.0,
                SchemeKind::HCate => 1.0 / cluster_total as f64,
                SchemeKind::VIate => {
                    if psm[j - 1] > 0.0 {
                        1.0 / (subset.len() as f64 * psm[j - 1])
                    } else {
                        0.0
                    }
                }
                SchemeKind::VCate => {
                    if n_ij > 0 {
                        1.0 / n_ij as f64
                    } else {
                        0.0
                    }
                }
            };
            for k in data.cell_range(i, j) {
                row[k] = w_row;
            }
            cell[i * n_j + (j - 1)] = match kind {
                SchemeKind::VCate => {
                    if n_ij > 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => w_row * n_ij as f64,
            };
        }
    }

    let (period, cluster, _) = aggregate(data, subset, &cell);
    Ok(WeightScheme {
        kind: Some(kind),
        row,
        cell,
        period,
        cluster,
        period_size_mean: psm,
        n_periods: n_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IndividualRecord;
    use approx::assert_abs_diff_eq;

    fn trial_with_sizes(sizes: &[Vec<usize>]) -> TrialDataset {
        // Adoption staggered so the layout is a valid wedge when J >= 3.
        let n_i = sizes.len();
        let n_j = sizes[0].len();
        let mut rows = Vec::new();
        for (i, row_sizes) in sizes.iter().enumerate() {
            let a = 2 + (i * (n_j - 1)) / n_i.max(1); // spread adoption over 2..=J
            for (jm1, &n) in row_sizes.iter().enumerate() {
                let j = jm1 + 1;
                let z = u8::from(j >= a);
                for k in 0..n {
                    rows.push(IndividualRecord {
                        cluster: i,
                        period: j,
                        treatment: z,
                        outcome: (i + j + k) as f64,
                        covariates: vec![],
                    });
                }
            }
        }
        TrialDataset::from_canonical_rows(rows, n_i, n_j, vec![]).unwrap()
    }

    fn check_aggregation(data: &TrialDataset, w: &WeightScheme) {
        let (n_i, n_j) = (data.n_clusters(), data.n_periods());
        for i in 0..n_i {
            for j in 1..=n_j {
                let row_sum: f64 = data.cell_range(i, j).map(|k| w.row(k)).sum();
                if data.cell_size(i, j) > 0 {
                    assert_abs_diff_eq!(row_sum, w.cell(i, j), epsilon = 1e-12);
                }
            }
        }
        for j in 1..=n_j {
            let s: f64 = (0..n_i).map(|i| w.cell(i, j)).sum();
            assert_abs_diff_eq!(s, w.period(j), epsilon = 1e-12);
        }
        for i in 0..n_i {
            let s: f64 = (1..=n_j).map(|j| w.cell(i, j)).sum();
            assert_abs_diff_eq!(s, w.cluster(i), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_sizes_give_constant_cell_weights() {
        let n = 3usize;
        let sizes = vec![vec![n; 4]; 4]; // I=4, J=4, N_ij = 3
        let data = trial_with_sizes(&sizes);
        let expect = [
            (SchemeKind::HIate, n as f64),
            (SchemeKind::HCate, 1.0 / 4.0),
            (SchemeKind::VIate, 1.0 / 4.0),
            (SchemeKind::VCate, 1.0),
        ];
        for (kind, val) in expect {
            let w = resolve_weights(&data, kind).unwrap();
            for i in 0..4 {
                for j in 1..=4 {
                    assert_abs_diff_eq!(w.cell(i, j), val, epsilon = 1e-12);
                }
            }
            check_aggregation(&data, &w);
        }
    }

    #[test]
    fn hcate_and_hiate_by_substitution() {
        // I=2, J=3; cluster 0 has N=2 everywhere, cluster 1 has N=4.
        let sizes = vec![vec![2, 2, 2], vec![4, 4, 4]];
        let data = trial_with_sizes(&sizes);
        let w = resolve_weights(&data, SchemeKind::HCate).unwrap();
        for j in 1..=3 {
            assert_abs_diff_eq!(w.cell(0, j), 2.0 / 6.0, epsilon = 1e-12);
            assert_abs_diff_eq!(w.cell(1, j), 4.0 / 12.0, epsilon = 1e-12);
            assert_abs_diff_eq!(w.period(j), 2.0 / 3.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w.cluster(0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.cluster(1), 1.0, epsilon = 1e-12);

        let w = resolve_weights(&data, SchemeKind::HIate).unwrap();
        for j in 1..=3 {
            assert_abs_diff_eq!(w.cell(0, j), 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(w.cell(1, j), 4.0, epsilon = 1e-12);
            assert_abs_diff_eq!(w.period(j), 6.0, epsilon = 1e-12);
        }
        check_aggregation(&data, &w);
    }

    #[test]
    fn viate_period_weight_is_one_with_plugin_mean() {
        let sizes = vec![vec![2, 5, 3], vec![4, 1, 6], vec![3, 3, 3]];
        let data = trial_with_sizes(&sizes);
        let w = resolve_weights(&data, SchemeKind::VIate).unwrap();
        for j in 1..=3 {
            assert_abs_diff_eq!(w.period(j), 1.0, epsilon = 1e-12);
        }
        check_aggregation(&data, &w);
    }

    #[test]
    fn vcate_errors_on_empty_rollout_cell() {
        let sizes = vec![vec![2, 0, 2], vec![2, 2, 2], vec![2, 2, 2]];
        let data = trial_with_sizes(&sizes);
        assert!(matches!(
            resolve_weights(&data, SchemeKind::VCate),
            Err(Error::EmptyCell { period: 2, .. })
        ));
        assert!(matches!(
            resolve_weights(&data, SchemeKind::VIate),
            Err(Error::EmptyCell { .. })
        ));
        // horizontal schemes tolerate the empty cell (zero weight)
        let w = resolve_weights(&data, SchemeKind::HIate).unwrap();
        assert_eq!(w.cell(0, 2), 0.0);
    }

    #[test]
    fn subset_recomputes_all_levels() {
        let sizes = vec![vec![2, 5, 3], vec![4, 1, 6], vec![3, 3, 3]];
        let data = trial_with_sizes(&sizes);
        let sub = ClusterSubset::leave_out(3, 1);
        let w = resolve_weights_on(&data, SchemeKind::VIate, &sub).unwrap();
        // Excluded cluster has no weight at any level.
        for j in 1..=3 {
            assert_eq!(w.cell(1, j), 0.0);
            // μ̂_j over remaining clusters only
            let expect = (data.cell_size(0, j) + data.cell_size(2, j)) as f64 / 2.0;
            assert_abs_diff_eq!(w.period_size_mean(j), expect, epsilon = 1e-12);
            assert_abs_diff_eq!(w.period(j), 1.0, epsilon = 1e-12);
        }
        assert_eq!(w.cluster(1), 0.0);
    }

    #[test]
    fn custom_row_weights_weighted_cell_mean() {
        // Cell outcomes {0, 2, 4} with weights (1, 1, 2) -> mean 2.5.
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
                outcome: 2.0,
                covariates: vec![],
            },
            IndividualRecord {
                cluster: 0,
                period: 1,
                treatment: 0,
                outcome: 4.0,
                covariates: vec![],
            },
        ];
        let data = TrialDataset::from_canonical_rows(rows, 1, 1, vec![]).unwrap();
        let w = WeightScheme::from_row_weights(&data, vec![1.0, 1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(w.cell_outcome_mean(&data, 0, 1), 2.5, epsilon = 1e-12);
        let u = WeightScheme::from_row_weights(&data, vec![1.0; 3]).unwrap();
        assert_abs_diff_eq!(u.cell_outcome_mean(&data, 0, 1), 2.0, epsilon = 1e-12);
    }
}
