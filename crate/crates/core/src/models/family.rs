//! Exponential-family variance functions and link functions shared by the
//! IRLS and Laplace fitting engines.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Link {
    #[inline]
    pub fn inv(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
        }
    }

    /// dμ/dη at the linear predictor value.
    #[inline]
    pub fn mu_eta(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let m = expit(eta);
                m * (1.0 - m)
            }
            Link::Log => eta.exp(),
        }
    }

    pub fn apply(&self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
        }
    }
}

impl Family {
    /// Variance function V(μ), floored away from zero for IRLS stability.
    #[inline]
    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => (mu * (1.0 - mu)).max(1e-10),
        }
    }

    /// Log-likelihood contribution of one observation (dispersion-free part).
    #[inline]
    pub fn loglik(&self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => -0.5 * (y - mu) * (y - mu),
            Family::Binomial => {
                let m = mu.clamp(1e-12, 1.0 - 1e-12);
                y * m.ln() + (1.0 - y) * (1.0 - m).ln()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn expit_is_stable_and_symmetric() {
        assert_abs_diff_eq!(expit(0.0), 0.5);
        assert_abs_diff_eq!(expit(3.0) + expit(-3.0), 1.0, epsilon = 1e-15);
        assert!(expit(-800.0) >= 0.0);
        assert!(expit(800.0) <= 1.0);
    }

    #[test]
    fn logit_round_trip() {
        for p in [0.01, 0.25, 0.5, 0.9] {
            assert_abs_diff_eq!(Link::Logit.inv(Link::Logit.apply(p)), p, epsilon = 1e-12);
        }
    }
}
