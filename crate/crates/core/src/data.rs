//! Long-format SW-CRT datasets: ingestion, validation, and indexing.
//!
//! A trial is `I` clusters observed over periods `1..J`. Each row is one
//! individual with a cluster id, period, cluster-level treatment indicator
//! `Z_ij`, outcome `Y_ijk`, and a covariate vector. Rows are grouped by
//! (cluster, period) cell at construction; the dataset is immutable after
//! validation and cheap to share across worker threads.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual observation in long format.
///
/// `cluster` and `period` are canonical indices: cluster is `0..I` into
/// [`TrialDataset::cluster_labels`], period is `1..=J` after label remapping.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub cluster: usize,
    pub period: usize,
    pub treatment: u8,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Column-name remapping for [`load_trial_csv`]. `covariates` empty means
/// "no covariate columns are read".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub cluster: String,
    pub period: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            cluster: "cluster".into(),
            period: "period".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: Vec::new(),
        }
    }
}

/// A validated, cell-indexed SW-CRT dataset.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    rows: Vec<IndividualRecord>,
    cluster_labels: Vec<String>,
    period_labels: Vec<String>,
    covariate_names: Vec<String>,
    /// Row range of cell (i, j) at `i * J + (j - 1)`; empty range if N_ij = 0.
    cells: Vec<Range<usize>>,
    /// Treatment indicator per cell; for empty cells inferred from the
    /// cluster's observed adoption pattern (0 when nothing is observed).
    cell_treatment: Vec<u8>,
    /// Arithmetic cell mean of the outcome; NaN for empty cells.
    cell_mean: Vec<f64>,
}

impl TrialDataset {
    /// Build a dataset from rows carrying original string labels.
    ///
    /// Cluster labels are ordered by first appearance; period labels are
    /// remapped onto `1..=J` (numeric labels sorted numerically, otherwise
    /// lexicographically) and the mapping is persisted in `period_labels`.
    pub fn from_labeled_rows(
        rows: Vec<(String, String, u8, f64, Vec<f64>)>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut cluster_labels: Vec<String> = Vec::new();
        for (c, _, _, _, _) in &rows {
            if !cluster_labels.contains(c) {
                cluster_labels.push(c.clone());
            }
        }
        let mut period_set: Vec<String> = Vec::new();
        for (_, p, _, _, _) in &rows {
            if !period_set.contains(p) {
                period_set.push(p.clone());
            }
        }
        let all_numeric = period_set.iter().all(|p| p.parse::<f64>().is_ok());
        if all_numeric {
            period_set.sort_by(|a, b| {
                a.parse::<f64>()
                    .unwrap()
                    .partial_cmp(&b.parse::<f64>().unwrap())
                    .unwrap()
            });
        } else {
            period_set.sort();
        }

        let cluster_of = |label: &str| cluster_labels.iter().position(|c| c == label).unwrap();
        let period_of = |label: &str| period_set.iter().position(|p| p == label).unwrap() + 1;

        let records: Vec<IndividualRecord> = rows
            .into_iter()
            .map(|(c, p, z, y, x)| IndividualRecord {
                cluster: cluster_of(&c),
                period: period_of(&p),
                treatment: z,
                outcome: y,
                covariates: x,
            })
            .collect();

        Self::from_indexed_rows(records, cluster_labels, period_set, covariate_names)
    }

    /// Build a dataset from rows that already use canonical indices
    /// (clusters `0..I`, periods `1..=J`). Used by the simulator.
    pub fn from_canonical_rows(
        records: Vec<IndividualRecord>,
        n_clusters: usize,
        n_periods: usize,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let cluster_labels = (1..=n_clusters).map(|i| i.to_string()).collect();
        let period_labels = (1..=n_periods).map(|j| j.to_string()).collect();
        Self::from_indexed_rows(records, cluster_labels, period_labels, covariate_names)
    }

    fn from_indexed_rows(
        mut records: Vec<IndividualRecord>,
        cluster_labels: Vec<String>,
        period_labels: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n_clusters = cluster_labels.len();
        let n_periods = period_labels.len();
        let n_cov = covariate_names.len();
        for r in &records {
            debug_assert!(r.cluster < n_clusters);
            debug_assert!(r.period >= 1 && r.period <= n_periods);
            if r.covariates.len() != n_cov {
                return Err(Error::InvalidConfig(format!(
                    "row has {} covariates, expected {}",
                    r.covariates.len(),
                    n_cov
                )));
            }
        }
        // Group rows by (cluster, period) with a stable sort.
        records.sort_by_key(|r| (r.cluster, r.period));
        let mut cells = vec![0..0; n_clusters * n_periods];
        let mut cell_treatment = vec![0u8; n_clusters * n_periods];
        let mut cell_mean = vec![f64::NAN; n_clusters * n_periods];
        let mut start = 0usize;
        while start < records.len() {
            let (i, j) = (records[start].cluster, records[start].period);
            let mut end = start;
            while end < records.len() && records[end].cluster == i && records[end].period == j {
                end += 1;
            }
            let z0 = records[start].treatment;
            if records[start..end].iter().any(|r| r.treatment != z0) {
                return Err(Error::MixedTreatmentWithinCell {
                    cluster: cluster_labels[i].clone(),
                    period: j,
                });
            }
            let idx = i * n_periods + (j - 1);
            cells[idx] = start..end;
            cell_treatment[idx] = z0;
            let sum: f64 = records[start..end].iter().map(|r| r.outcome).sum();
            cell_mean[idx] = sum / (end - start) as f64;
            start = end;
        }
        // Infer treatment for empty cells from the observed adoption pattern:
        // treated from the first observed treated period onward.
        for i in 0..n_clusters {
            let first_treated = (1..=n_periods).find(|&j| {
                let idx = i * n_periods + (j - 1);
                !cells[idx].is_empty() && cell_treatment[idx] == 1
            });
            if let Some(a) = first_treated {
                for j in a..=n_periods {
                    let idx = i * n_periods + (j - 1);
                    if cells[idx].is_empty() {
                        cell_treatment[idx] = 1;
                    }
                }
            }
        }
        Ok(TrialDataset {
            rows: records,
            cluster_labels,
            period_labels,
            covariate_names,
            cells,
            cell_treatment,
            cell_mean,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_labels.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[IndividualRecord] {
        &self.rows
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    /// Original period label for canonical period `j` (1-based).
    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    #[inline]
    fn cell_idx(&self, cluster: usize, period: usize) -> usize {
        cluster * self.n_periods() + (period - 1)
    }

    /// Rows of cell (i, j); empty slice when N_ij = 0.
    pub fn cell(&self, cluster: usize, period: usize) -> &[IndividualRecord] {
        &self.rows[self.cells[self.cell_idx(cluster, period)].clone()]
    }

    /// Row range of cell (i, j) in `rows()`.
    pub fn cell_range(&self, cluster: usize, period: usize) -> Range<usize> {
        self.cells[self.cell_idx(cluster, period)].clone()
    }

    pub fn cell_size(&self, cluster: usize, period: usize) -> usize {
        self.cells[self.cell_idx(cluster, period)].len()
    }

    /// Observed (or inferred, for empty cells) treatment indicator Z_ij.
    pub fn cell_treatment(&self, cluster: usize, period: usize) -> u8 {
        self.cell_treatment[self.cell_idx(cluster, period)]
    }

    /// Arithmetic mean outcome of cell (i, j); NaN when the cell is empty.
    pub fn cell_mean(&self, cluster: usize, period: usize) -> f64 {
        self.cell_mean[self.cell_idx(cluster, period)]
    }

    /// Rollout periods 2..=J-1, the only periods entering estimands.
    pub fn rollout_periods(&self) -> Range<usize> {
        2..self.n_periods()
    }

    /// Check that every outcome is 0 or 1 (required for binomial fits).
    pub fn outcomes_are_binary(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.outcome == 0.0 || r.outcome == 1.0)
    }

    /// Serialize back to the long CSV format (original labels preserved).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "cluster".to_string(),
            "period".to_string(),
            "treatment".to_string(),
            "outcome".to_string(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.cluster_labels[r.cluster].clone(),
                self.period_labels[r.period - 1].clone(),
                r.treatment.to_string(),
                format_f64(r.outcome),
            ];
            rec.extend(r.covariates.iter().map(|&v| format_f64(v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

fn format_f64(v: f64) -> String {
    // Shortest representation that round-trips.
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

/// Load a long-format CSV with the given column schema.
///
/// Required columns: cluster, period, treatment, outcome. Treatment must be
/// 0/1; outcome and covariates must parse as floats.
pub fn load_trial_csv(path: &Path, schema: &ColumnSchema) -> Result<TrialDataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let c_cluster = find(&schema.cluster)?;
    let c_period = find(&schema.period)?;
    let c_treat = find(&schema.treatment)?;
    let c_outcome = find(&schema.outcome)?;
    let c_covs: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<_>>()?;

    let parse_num = |row: usize, col: &str, raw: &str| -> Result<f64> {
        raw.trim().parse::<f64>().map_err(|_| Error::NonNumericValue {
            row,
            column: col.to_string(),
            value: raw.to_string(),
        })
    };

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = line + 2; // 1-based, after the header
        let z_raw = record.get(c_treat).unwrap_or("");
        let z_num = parse_num(row_no, &schema.treatment, z_raw)?;
        if z_num != 0.0 && z_num != 1.0 {
            return Err(Error::NonNumericValue {
                row: row_no,
                column: schema.treatment.clone(),
                value: z_raw.to_string(),
            });
        }
        let y = parse_num(row_no, &schema.outcome, record.get(c_outcome).unwrap_or(""))?;
        let covs = c_covs
            .iter()
            .zip(&schema.covariates)
            .map(|(&ci, name)| parse_num(row_no, name, record.get(ci).unwrap_or("")))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((
            record.get(c_cluster).unwrap_or("").to_string(),
            record.get(c_period).unwrap_or("").to_string(),
            z_num as u8,
            y,
            covs,
        ));
    }
    TrialDataset::from_labeled_rows(rows, schema.covariates.clone())
}

/// The design layout recovered from the observed treatment pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    /// Adoption time A_i per cluster (first treated period), each in 2..=J.
    pub adoption_time: Vec<usize>,
    /// I_j: number of treated clusters per period (index j-1).
    pub treated_count: Vec<usize>,
    /// e_j = I_j / I per period.
    pub propensity: Vec<f64>,
    /// N_ij cell sizes, row-major I x J.
    pub cell_sizes: Vec<usize>,
}

impl DesignLayout {
    pub fn cell_size(&self, cluster: usize, period: usize, n_periods: usize) -> usize {
        self.cell_sizes[cluster * n_periods + (period - 1)]
    }
}

/// Recover adoption times and propensities, enforcing the stepped-wedge
/// structure: monotone adoption, all-control baseline, full final rollout,
/// and strict overlap (0 < e_j < 1) in every rollout period.
pub fn derive_layout(data: &TrialDataset) -> Result<DesignLayout> {
    let n_i = data.n_clusters();
    let n_j = data.n_periods();
    let mut adoption = Vec::with_capacity(n_i);
    for i in 0..n_i {
        let observed: Vec<(usize, u8)> = (1..=n_j)
            .filter(|&j| data.cell_size(i, j) > 0)
            .map(|j| (j, data.cell_treatment(i, j)))
            .collect();
        let first_treated = observed.iter().find(|(_, z)| *z == 1).map(|(j, _)| *j);
        match first_treated {
            None => {
                return Err(Error::FinalPeriodUntreated(
                    data.cluster_labels()[i].clone(),
                ))
            }
            Some(a) => {
                // Once treated, always treated; never treated before A_i.
                for &(j, z) in &observed {
                    let expected = u8::from(j >= a);
                    if z != expected {
                        return Err(Error::MonotonicityViolation(
                            data.cluster_labels()[i].clone(),
                        ));
                    }
                }
                if a == 1 {
                    return Err(Error::BaselineTreated);
                }
                adoption.push(a);
            }
        }
    }
    let treated_count: Vec<usize> = (1..=n_j)
        .map(|j| adoption.iter().filter(|&&a| a <= j).count())
        .collect();
    let propensity: Vec<f64> = treated_count.iter().map(|&c| c as f64 / n_i as f64).collect();
    if propensity[0] > 0.0 {
        return Err(Error::BaselineTreated);
    }
    if n_j < 3 {
        return Err(Error::NoRolloutPeriod {
            period: n_j,
            propensity: propensity[n_j - 1],
        });
    }
    for j in 2..n_j {
        let e = propensity[j - 1];
        if e <= 0.0 || e >= 1.0 {
            return Err(Error::NoRolloutPeriod {
                period: j,
                propensity: e,
            });
        }
    }
    let mut cell_sizes = vec![0usize; n_i * n_j];
    for i in 0..n_i {
        for j in 1..=n_j {
            cell_sizes[i * n_j + (j - 1)] = data.cell_size(i, j);
        }
    }
    Ok(DesignLayout {
        adoption_time: adoption,
        treated_count,
        propensity,
        cell_sizes,
    })
}

/// A subset of clusters to include in a computation. Leave-one-cluster-out
/// refits use this instead of materializing reduced datasets.
#[derive(Debug, Clone)]
pub struct ClusterSubset {
    included: Vec<bool>,
    n_included: usize,
}

impl ClusterSubset {
    pub fn full(n_clusters: usize) -> Self {
        ClusterSubset {
            included: vec![true; n_clusters],
            n_included: n_clusters,
        }
    }

    pub fn leave_out(n_clusters: usize, excluded: usize) -> Self {
        let mut included = vec![true; n_clusters];
        included[excluded] = false;
        ClusterSubset {
            included,
            n_included: n_clusters - 1,
        }
    }

    #[inline]
    pub fn contains(&self, cluster: usize) -> bool {
        self.included[cluster]
    }

    pub fn len(&self) -> usize {
        self.n_included
    }

    pub fn is_empty(&self) -> bool {
        self.n_included == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.included
            .iter()
            .enumerate()
            .filter(|(_, &inc)| inc)
            .map(|(i, _)| i)
    }
}

/// One row of the cluster-period summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cluster: usize,
    pub period: usize,
    pub size: usize,
    /// Weighted cell mean under the scheme's within-cell weights.
    pub mean: f64,
}

/// Per-cell weighted means under a weight scheme. Errors with `EmptyCell`
/// when an empty cell carries nonzero weight.
pub fn cluster_period_summary(
    data: &TrialDataset,
    scheme: &crate::weights::WeightScheme,
) -> Result<Vec<CellSummary>> {
    let mut out = Vec::with_capacity(data.n_clusters() * data.n_periods());
    for i in 0..data.n_clusters() {
        for j in 1..=data.n_periods() {
            let n = data.cell_size(i, j);
            if n == 0 {
                if scheme.cell(i, j) != 0.0 {
                    return Err(Error::EmptyCell {
                        cluster: data.cluster_labels()[i].clone(),
                        period: j,
                    });
                }
                continue;
            }
            out.push(CellSummary {
                cluster: i,
                period: j,
                size: n,
                mean: scheme.cell_outcome_mean(data, i, j),
            });
        }
    }
    Ok(out)
}
