//! Scenario data-generating processes and super-population truth.
//!
//! Continuous scenarios (J = 6 by default) draw potential outcomes from
//!
//! ```text
//! Y(a) = β_0j + β_1j·X₁ + β_2j·X₂² + θ·a + α_i + δ_ij + ε,
//! β_0j: 0.25→0.27 linearly, β_1j = 3j/2, β_2j = j/J,
//! α ~ N(0, 0.05), δ ~ N(0, 0.05), ε ~ N(0, 0.9),
//! X₁ ~ Bernoulli(0.5), X₂ ~ N(0, 0.01),
//! ```
//!
//! and binary scenarios (J = 4) the same structure on the logit scale with
//! β_0j: 0.05→0.25, β_1j = j, β_2j = j/J, α, δ ~ N(0, 0.3),
//! X₁ ~ Bernoulli(0.1). The individualized effect θ varies by scenario and
//! may depend on the cell size N_ij (informative size) and on the period.
//!
//! True estimands are evaluated over a super population of `m` clusters by
//! conditional expectation: the mean-zero gaussian terms are dropped for
//! the continuous family (exact by linearity of the estimand displays) and
//! the Bernoulli draw is replaced by its expit mean for the binary family
//! (with α, δ still simulated).

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::data::{IndividualRecord, TrialDataset};
use crate::error::Result;
use crate::models::expit;

use super::{Scenario, ScenarioConfig};

/// A generated trial with both potential outcomes attached (row-aligned).
pub struct SimulatedTrial {
    pub data: TrialDataset,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Deterministic substream: one independent ChaCha stream per purpose.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Equal-allocation staggered rollout: I/(J−1) clusters per step (earlier
/// steps absorb the remainder), assigned by a seeded shuffle.
pub fn randomize_rollout(n_clusters: usize, n_periods: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let steps = n_periods - 1;
    let base = n_clusters / steps;
    let rem = n_clusters % steps;
    let mut adoption = Vec::with_capacity(n_clusters);
    for s in 0..steps {
        let count = base + usize::from(s < rem);
        adoption.extend(std::iter::repeat(s + 2).take(count));
    }
    adoption.shuffle(rng);
    adoption
}

pub(crate) struct ScenarioParams {
    pub binary: bool,
    /// β_0j endpoints.
    pub beta0: (f64, f64),
    pub sd_cluster: f64,
    pub sd_cell: f64,
    pub sd_noise: f64,
    pub p_x1: f64,
}

impl Scenario {
    pub(crate) fn params(&self) -> ScenarioParams {
        if self.is_binary() {
            ScenarioParams {
                binary: true,
                beta0: (0.05, 0.25),
                sd_cluster: 0.3f64.sqrt(),
                sd_cell: 0.3f64.sqrt(),
                sd_noise: 0.0,
                p_x1: 0.1,
            }
        } else {
            ScenarioParams {
                binary: false,
                beta0: (0.25, 0.27),
                sd_cluster: 0.05f64.sqrt(),
                sd_cell: 0.05f64.sqrt(),
                sd_noise: 0.9f64.sqrt(),
                p_x1: 0.5,
            }
        }
    }

    /// Cell-size distribution bounds for period j (inclusive).
    pub(crate) fn size_bounds(&self, j: usize) -> (usize, usize) {
        match self {
            Scenario::C1 | Scenario::C2 | Scenario::CDelta => (20, 100),
            Scenario::C3 => (10 + 10 * j, 90 + 10 * j),
            Scenario::B1 | Scenario::B2 | Scenario::BDelta => (5, 50),
            Scenario::B3 => (5 + 5 * j, 45 + 10 * j),
        }
    }

    pub(crate) fn expected_size(&self, j: usize) -> f64 {
        let (lo, hi) = self.size_bounds(j);
        (lo + hi) as f64 / 2.0
    }

    /// β_1j coefficient on X₁.
    fn beta1(&self, j: usize) -> f64 {
        if self.is_binary() {
            j as f64
        } else {
            1.5 * j as f64
        }
    }

    /// β_2j coefficient on X₂².
    fn beta2(&self, j: usize, n_periods: usize) -> f64 {
        j as f64 / n_periods as f64
    }

    /// The individualized treatment effect θ_ijk.
    ///
    /// `n_bar` is the trial-wide average cell size (a sample quantity for
    /// generated trials, its expectation for super-population truth).
    pub(crate) fn theta(
        &self,
        j: usize,
        n_periods: usize,
        x1: f64,
        x2: f64,
        n_ij: f64,
        n_bar: f64,
        delta: f64,
    ) -> f64 {
        let jj = j as f64;
        match self {
            Scenario::C1 => 1.0 + x1.sin() + (-x2).exp(),
            Scenario::C2 => {
                let e_n = self.expected_size(j);
                0.5 - x1.sin() - 1.5 * (-x2).exp()
                    + 4.0 * n_ij.sqrt() / (5.0 * n_bar)
                    + 3.0 * n_ij.ln() * n_ij * n_ij / (2.0 * e_n * e_n)
            }
            Scenario::C3 => {
                let e_n1 = self.expected_size(1);
                1.0 + jj * x1.sin() - jj * jj * (-x2).exp()
                    + n_ij.sqrt() / n_bar
                    + 3.0 * n_ij.ln() * n_ij * n_ij / (e_n1 * e_n1)
            }
            Scenario::CDelta => {
                let e_n = self.expected_size(j);
                1.0 + x1.sin()
                    + (-x2).exp()
                    + delta * n_ij.ln() * n_ij * n_ij / (e_n * e_n)
            }
            Scenario::B1 => {
                1.0 + 0.5 * (std::f64::consts::PI * x1).sin()
                    + (1.0 + x1 + 2.0 * x2 * x2).ln()
            }
            Scenario::B2 => {
                let e_n = self.expected_size(j);
                1.0 + (std::f64::consts::PI * x1).sin()
                    + 0.5 * (1.0 + x1 + x2 * x2).ln()
                    + n_ij.ln() * n_ij * n_ij / (e_n * e_n)
            }
            Scenario::B3 => {
                let e_n = self.expected_size(j);
                0.1 + jj / (2.0 * n_periods as f64) * (std::f64::consts::PI * x1).sin()
                    + jj * jj / n_periods as f64 * (1.0 + 0.5 * x1 + 0.2 * x2 * x2).ln()
                    + n_ij.ln() * n_ij * n_ij / (2.0 * e_n * e_n)
            }
            Scenario::BDelta => {
                let e_n = self.expected_size(j);
                0.5 + 0.5 * (std::f64::consts::PI * x1).sin()
                    + (1.0 + x1 / 3.0 + x2 * x2).ln()
                    + delta * n_ij.ln() * n_ij * n_ij / (e_n * e_n)
            }
        }
    }

    fn beta0_at(&self, j: usize, n_periods: usize) -> f64 {
        let (lo, hi) = self.params().beta0;
        if n_periods == 1 {
            return lo;
        }
        lo + (hi - lo) * (j as f64 - 1.0) / (n_periods as f64 - 1.0)
    }
}

/// Generate one trial under the scenario (substream `replicate + 1`).
pub fn generate_trial(config: &ScenarioConfig, replicate: usize) -> Result<SimulatedTrial> {
    let mut rng = stream(config.seed, replicate as u64 + 1);
    let scenario = config.scenario;
    let params = scenario.params();
    let (n_i, n_j) = (config.n_clusters, config.n_periods);
    let adoption = randomize_rollout(n_i, n_j, &mut rng);

    // cell sizes first: θ in some scenarios depends on the realized N̄
    let mut sizes = vec![0usize; n_i * n_j];
    for i in 0..n_i {
        for j in 1..=n_j {
            let (lo, hi) = scenario.size_bounds(j);
            sizes[i * n_j + (j - 1)] = rng.random_range(lo..=hi);
        }
    }
    let n_bar = sizes.iter().sum::<usize>() as f64 / (n_i * n_j) as f64;

    let mut rows = Vec::with_capacity(sizes.iter().sum());
    let mut y0 = Vec::with_capacity(rows.capacity());
    let mut y1 = Vec::with_capacity(rows.capacity());
    for i in 0..n_i {
        let alpha: f64 = params.sd_cluster * rng.sample::<f64, _>(StandardNormal);
        for j in 1..=n_j {
            let delta_ij: f64 = params.sd_cell * rng.sample::<f64, _>(StandardNormal);
            let n_ij = sizes[i * n_j + (j - 1)];
            let z = u8::from(j >= adoption[i]);
            for _ in 0..n_ij {
                let x1 = f64::from(rng.random::<f64>() < params.p_x1);
                let x2: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
                let theta = scenario.theta(j, n_j, x1, x2, n_ij as f64, n_bar, config.delta);
                let base = scenario.beta0_at(j, n_j)
                    + scenario.beta1(j) * x1
                    + scenario.beta2(j, n_j) * x2 * x2
                    + alpha
                    + delta_ij;
                let (p0, p1) = if params.binary {
                    let u: f64 = rng.random();
                    let (q0, q1) = (expit(base), expit(base + theta));
                    // common uniform keeps Y(0) ≤ Y(1) whenever θ ≥ 0
                    (f64::from(u < q0), f64::from(u < q1))
                } else {
                    let eps: f64 = params.sd_noise * rng.sample::<f64, _>(StandardNormal);
                    (base + eps, base + theta + eps)
                };
                rows.push(IndividualRecord {
                    cluster: i,
                    period: j,
                    treatment: z,
                    outcome: if z == 1 { p1 } else { p0 },
                    covariates: vec![x1, x2],
                });
                y0.push(p0);
                y1.push(p1);
            }
        }
    }
    // Rows are emitted grouped by (cluster, period), so the stable sort in
    // the constructor preserves order and y0/y1 stay row-aligned.
    let data =
        TrialDataset::from_canonical_rows(rows, n_i, n_j, vec!["x1".into(), "x2".into()])?;
    Ok(SimulatedTrial { data, y0, y1 })
}

/// True estimands of the scenario, by super-population Monte Carlo.
#[derive(Debug, Clone)]
pub struct TruthEstimands {
    /// ψ-scale τ per estimand in scheme order (difference for the gaussian
    /// family, log odds ratio for the binomial family).
    pub psi_tau: [f64; 4],
    pub mu: [(f64, f64); 4],
    /// Batch-mean standard errors of the ψ-scale values.
    pub se: [f64; 4],
    pub m: usize,
}

struct Accum {
    // period sums over clusters: Σ_i Σ_k p_z and Σ_i N_ij
    period_outcome: Vec<[f64; 2]>,
    period_size: Vec<f64>,
    // per-cluster horizontal ratios and per-cell vertical means
    hc_ratio: [f64; 2],
    vc_mean: Vec<[f64; 2]>,
    clusters: f64,
}

impl Accum {
    fn new(n_j: usize) -> Accum {
        Accum {
            period_outcome: vec![[0.0; 2]; n_j + 1],
            period_size: vec![0.0; n_j + 1],
            hc_ratio: [0.0; 2],
            vc_mean: vec![[0.0; 2]; n_j + 1],
            clusters: 0.0,
        }
    }

    fn merge(&mut self, other: &Accum) {
        for j in 0..self.period_outcome.len() {
            self.period_outcome[j][0] += other.period_outcome[j][0];
            self.period_outcome[j][1] += other.period_outcome[j][1];
            self.period_size[j] += other.period_size[j];
            self.vc_mean[j][0] += other.vc_mean[j][0];
            self.vc_mean[j][1] += other.vc_mean[j][1];
        }
        self.hc_ratio[0] += other.hc_ratio[0];
        self.hc_ratio[1] += other.hc_ratio[1];
        self.clusters += other.clusters;
    }

    /// μ(z) for the four estimands, in scheme order.
    fn mus(&self, rollout: std::ops::Range<usize>) -> [(f64, f64); 4] {
        let nper = rollout.len() as f64;
        let mut hi = [0.0; 2];
        let mut size = 0.0;
        let mut vi = [0.0; 2];
        let mut vc = [0.0; 2];
        for j in rollout {
            for z in 0..2 {
                hi[z] += self.period_outcome[j][z];
                vi[z] += self.period_outcome[j][z] / self.period_size[j] / nper;
                vc[z] += self.vc_mean[j][z] / self.clusters / nper;
            }
            size += self.period_size[j];
        }
        [
            (hi[1] / size, hi[0] / size),
            (
                self.hc_ratio[1] / self.clusters,
                self.hc_ratio[0] / self.clusters,
            ),
            (vi[1], vi[0]),
            (vc[1], vc[0]),
        ]
    }
}

/// Evaluate the four true estimands over `m` super-population clusters.
pub fn true_estimands(config: &ScenarioConfig) -> Result<TruthEstimands> {
    let scenario = config.scenario;
    let params = scenario.params();
    let n_j = config.n_periods;
    let m = config.superpop_m;
    let mut rng = stream(config.seed, 0);

    // Population-level N̄ for the θ formulas that depend on it: the mean
    // over periods of E[N_ij].
    let n_bar: f64 =
        (1..=n_j).map(|j| scenario.expected_size(j)).sum::<f64>() / n_j as f64;

    let n_batches = 64usize.min(m);
    let mut batches: Vec<Accum> = Vec::with_capacity(n_batches);
    let mut total = Accum::new(n_j);
    for batch in 0..n_batches {
        let count = m / n_batches + usize::from(batch < m % n_batches);
        let mut acc = Accum::new(n_j);
        for _ in 0..count {
            accumulate_cluster(&mut acc, scenario, &params, n_j, n_bar, config.delta, &mut rng);
        }
        total.merge(&acc);
        batches.push(acc);
    }

    let rollout = 2..n_j;
    let mu = total.mus(rollout.clone());
    let psi = |m1: f64, m0: f64| -> f64 {
        if params.binary {
            (m1 / (1.0 - m1)).ln() - (m0 / (1.0 - m0)).ln()
        } else {
            m1 - m0
        }
    };
    let mut psi_tau = [0.0; 4];
    for k in 0..4 {
        psi_tau[k] = psi(mu[k].0, mu[k].1);
    }
    // batch-mean standard errors
    let mut se = [0.0; 4];
    for k in 0..4 {
        let vals: Vec<f64> = batches
            .iter()
            .map(|b| {
                let m = b.mus(rollout.clone());
                psi(m[k].0, m[k].1)
            })
            .collect();
        let nb = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / nb;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nb - 1.0);
        se[k] = (var / nb).sqrt();
    }
    Ok(TruthEstimands {
        psi_tau,
        mu,
        se,
        m,
    })
}

fn accumulate_cluster(
    acc: &mut Accum,
    scenario: Scenario,
    params: &ScenarioParams,
    n_j: usize,
    n_bar: f64,
    delta: f64,
    rng: &mut ChaCha12Rng,
) {
    let alpha: f64 = params.sd_cluster * rng.sample::<f64, _>(StandardNormal);
    let mut h_num = [0.0; 2];
    let mut h_den = 0.0;
    for j in 2..n_j {
        let (lo, hi) = scenario.size_bounds(j);
        let n_ij = rng.random_range(lo..=hi);
        let delta_ij: f64 = params.sd_cell * rng.sample::<f64, _>(StandardNormal);
        let mut cell = [0.0; 2];
        for _ in 0..n_ij {
            let x1 = f64::from(rng.random::<f64>() < params.p_x1);
            let x2: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
            let theta = scenario.theta(j, n_j, x1, x2, n_ij as f64, n_bar, delta);
            let base = {
                let (lo, hi) = params.beta0;
                lo + (hi - lo) * (j as f64 - 1.0) / (n_j as f64 - 1.0)
                    + scenario.beta1(j) * x1
                    + scenario.beta2(j, n_j) * x2 * x2
            };
            if params.binary {
                cell[0] += expit(base + alpha + delta_ij);
                cell[1] += expit(base + theta + alpha + delta_ij);
            } else {
                // mean-zero terms dropped: exact for linear functionals
                cell[0] += base;
                cell[1] += base + theta;
            }
        }
        for z in 0..2 {
            acc.period_outcome[j][z] += cell[z];
            acc.vc_mean[j][z] += cell[z] / n_ij as f64;
            h_num[z] += cell[z];
        }
        acc.period_size[j] += n_ij as f64;
        h_den += n_ij as f64;
    }
    acc.hc_ratio[0] += h_num[0] / h_den;
    acc.hc_ratio[1] += h_num[1] / h_den;
    acc.clusters += 1.0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rollout_counts() {
        let mut rng = stream(1, 7);
        let adoption = randomize_rollout(30, 6, &mut rng);
        for step in 2..=6usize {
            assert_eq!(adoption.iter().filter(|&&a| a == step).count(), 6);
        }
        let treated: Vec<usize> = (1..=6)
            .map(|j| adoption.iter().filter(|&&a| a <= j).count())
            .collect();
        assert_eq!(treated, vec![0, 6, 12, 18, 24, 30]);

        let mut rng = stream(1, 7);
        let again = randomize_rollout(30, 6, &mut rng);
        assert_eq!(adoption, again);

        let mut rng = stream(1, 8);
        let adoption = randomize_rollout(4, 3, &mut rng);
        assert_eq!(adoption.iter().filter(|&&a| a == 2).count(), 2);
        assert_eq!(adoption.iter().filter(|&&a| a == 3).count(), 2);
    }

    #[test]
    fn theta_formula_values() {
        // C1 at X₁ = 0, X₂ = 0: 1 + sin(0) + exp(0) = 2
        let th = Scenario::C1.theta(3, 6, 0.0, 0.0, 60.0, 60.0, 0.0);
        assert_abs_diff_eq!(th, 2.0, epsilon = 1e-15);
        // B1 at X = 0: 1 + 0 + ln(1) = 1
        let th = Scenario::B1.theta(2, 4, 0.0, 0.0, 30.0, 27.5, 0.0);
        assert_abs_diff_eq!(th, 1.0, epsilon = 1e-15);
        // C2 at X = 0, N = 60, N̄ = 60: scripted oracle value
        let expect = 0.5 - 0.0 - 1.5 + 4.0 * 60f64.sqrt() / (5.0 * 60.0)
            + 3.0 * 60f64.ln() * 3600.0 / (2.0 * 3600.0);
        let th = Scenario::C2.theta(3, 6, 0.0, 0.0, 60.0, 60.0, 0.0);
        assert_abs_diff_eq!(th, expect, epsilon = 1e-12);
        // the dial at δ = 0 coincides with C1
        let a = Scenario::CDelta.theta(4, 6, 1.0, 0.2, 44.0, 60.0, 0.0);
        let b = Scenario::C1.theta(4, 6, 1.0, 0.2, 44.0, 60.0, 0.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn generated_trial_is_consistent() {
        let config = ScenarioConfig::new(Scenario::C1).with_dims(8, 6).with_seed(5);
        let trial = generate_trial(&config, 0).unwrap();
        assert_eq!(trial.data.n_clusters(), 8);
        assert_eq!(trial.data.n_periods(), 6);
        assert_eq!(trial.y0.len(), trial.data.n_rows());
        // potential-outcome consistency: observed = Y(Z)
        for (r, rec) in trial.data.rows().iter().enumerate() {
            let want = if rec.treatment == 1 {
                trial.y1[r]
            } else {
                trial.y0[r]
            };
            assert_eq!(rec.outcome, want);
        }
        // determinism
        let again = generate_trial(&config, 0).unwrap();
        assert_eq!(trial.data.rows(), again.data.rows());
        // different replicate differs
        let other = generate_trial(&config, 1).unwrap();
        assert_ne!(trial.data.rows(), other.data.rows());
    }

    #[test]
    fn binary_outcomes_are_binary() {
        let config = ScenarioConfig::new(Scenario::B1).with_dims(6, 4).with_seed(9);
        let trial = generate_trial(&config, 3).unwrap();
        assert!(trial.data.outcomes_are_binary());
    }
}
