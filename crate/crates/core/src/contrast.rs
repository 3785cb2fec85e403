//! Contrast functions f(a, b) and the reporting transform ψ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The effect scale. `psi` is the monotone transform used to stabilize
/// inference: identity on the difference scale, natural log on ratio scales
/// (overridable via [`ContrastScale::with_psi`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleKind {
    Difference,
    RiskRatio,
    OddsRatio,
}

impl ScaleKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScaleKind::Difference => "rd",
            ScaleKind::RiskRatio => "rr",
            ScaleKind::OddsRatio => "or",
        }
    }

    pub fn parse(s: &str) -> Option<ScaleKind> {
        match s.to_ascii_lowercase().as_str() {
            "rd" | "difference" | "diff" => Some(ScaleKind::Difference),
            "rr" | "risk-ratio" | "riskratio" => Some(ScaleKind::RiskRatio),
            "or" | "odds-ratio" | "oddsratio" => Some(ScaleKind::OddsRatio),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsiTransform {
    Identity,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastScale {
    pub kind: ScaleKind,
    pub psi: PsiTransform,
}

impl ContrastScale {
    pub fn new(kind: ScaleKind) -> Self {
        let psi = match kind {
            ScaleKind::Difference => PsiTransform::Identity,
            ScaleKind::RiskRatio | ScaleKind::OddsRatio => PsiTransform::Log,
        };
        ContrastScale { kind, psi }
    }

    pub fn with_psi(mut self, psi: PsiTransform) -> Self {
        self.psi = psi;
        self
    }

    pub fn psi(&self, tau: f64) -> f64 {
        match self.psi {
            PsiTransform::Identity => tau,
            PsiTransform::Log => tau.ln(),
        }
    }

    pub fn psi_inv(&self, t: f64) -> f64 {
        match self.psi {
            PsiTransform::Identity => t,
            PsiTransform::Log => t.exp(),
        }
    }
}

/// f(μ(1), μ(0)) with domain checks for the ratio scales.
pub fn apply_contrast(scale: ContrastScale, mu1: f64, mu0: f64) -> Result<f64> {
    match scale.kind {
        ScaleKind::Difference => Ok(mu1 - mu0),
        ScaleKind::RiskRatio => {
            if mu0 <= 0.0 {
                return Err(Error::ScaleDomain(format!(
                    "risk ratio needs mu(0) > 0, got {mu0}"
                )));
            }
            Ok(mu1 / mu0)
        }
        ScaleKind::OddsRatio => {
            for (arm, mu) in [(1u8, mu1), (0u8, mu0)] {
                if !(0.0..=1.0).contains(&mu) || mu == 0.0 || mu == 1.0 {
                    return Err(Error::ScaleDomain(format!(
                        "odds ratio needs mu({arm}) in (0,1), got {mu}"
                    )));
                }
            }
            Ok(mu1 * (1.0 - mu0) / ((1.0 - mu1) * mu0))
        }
    }
}
