//! Hyperprior families and the named prior presets.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{EdvcmError, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Prior on a strictly positive hyperparameter.
///
/// `HalfT` and `Normal` are truncated to the positive half-line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorFamily {
    /// `log x ~ N(mu, sigma^2)`.
    LogNormal { mu: f64, sigma: f64 },
    /// Student-t with `nu` degrees of freedom restricted to `x > 0`.
    HalfT { nu: f64, location: f64, scale: f64 },
    /// Normal with mean and standard deviation restricted to `x > 0`.
    Normal { mean: f64, sd: f64 },
}

impl PriorFamily {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriorFamily::LogNormal { mu, sigma } => mu.is_finite() && sigma > 0.0 && sigma.is_finite(),
            PriorFamily::HalfT { nu, location, scale } => {
                nu > 0.0 && location.is_finite() && scale > 0.0 && scale.is_finite()
            }
            PriorFamily::Normal { mean, sd } => mean.is_finite() && sd > 0.0 && sd.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(EdvcmError::Prior(format!("invalid parameters in {self:?}")))
        }
    }

    /// Log density of `u = log x` (including the Jacobian `+u`) and its derivative in `u`.
    pub fn log_density_log_scale(&self, u: f64) -> (f64, f64) {
        let x = u.exp();
        match *self {
            PriorFamily::LogNormal { mu, sigma } => {
                let r = (u - mu) / sigma;
                (-LN_SQRT_2PI - sigma.ln() - 0.5 * r * r, -r / sigma)
            }
            PriorFamily::HalfT { nu, location, scale } => {
                let r = (x - location) / scale;
                let mass = positive_mass_t(nu, location, scale);
                let log_norm = ln_gamma(0.5 * (nu + 1.0))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI).ln()
                    - scale.ln()
                    - mass.ln();
                let q = 1.0 + r * r / nu;
                let value = log_norm - 0.5 * (nu + 1.0) * q.ln() + u;
                let grad = -(nu + 1.0) * r * x / (scale * nu * q) + 1.0;
                (value, grad)
            }
            PriorFamily::Normal { mean, sd } => {
                let r = (x - mean) / sd;
                let mass = 1.0 - std_normal().cdf(-mean / sd);
                let value = -LN_SQRT_2PI - sd.ln() - mass.ln() - 0.5 * r * r + u;
                (value, -r * x / sd + 1.0)
            }
        }
    }

    /// Median of the (truncated) distribution of `x`.
    pub fn median(&self) -> f64 {
        match *self {
            PriorFamily::LogNormal { mu, .. } => mu.exp(),
            PriorFamily::HalfT { nu, location, scale } => {
                let t = StudentsT::new(0.0, 1.0, nu).expect("validated");
                let lo = t.cdf(-location / scale);
                location + scale * t.inverse_cdf(lo + 0.5 * (1.0 - lo))
            }
            PriorFamily::Normal { mean, sd } => {
                let n = std_normal();
                let lo = n.cdf(-mean / sd);
                mean + sd * n.inverse_cdf(lo + 0.5 * (1.0 - lo))
            }
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn positive_mass_t(nu: f64, location: f64, scale: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, nu).expect("validated");
    1.0 - t.cdf(-location / scale)
}

/// How the exposure and lag coefficient vectors are modelled a priori.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientPrior {
    /// Zero-mean GP with the separable exponential product kernel.
    GaussianProcess,
    /// Independent `N(0, sd^2)` on every coefficient.
    IndependentNormal { sd: f64 },
}

/// Full prior specification for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub coefficients: CoefficientPrior,
    pub sigma_beta: PriorFamily,
    pub phi: PriorFamily,
    pub tau: PriorFamily,
    pub sigma_theta: PriorFamily,
    pub gamma: PriorFamily,
    pub eta: PriorFamily,
    /// Standard deviation of the normal prior on covariate coefficients.
    #[serde(default = "default_zeta_sd")]
    pub zeta_sd: f64,
    /// Use `phi` as the duration lengthscale of the lag kernel.
    #[serde(default)]
    pub tie_gamma_to_phi: bool,
    /// Diagonal jitter relative to the marginal variance.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_zeta_sd() -> f64 {
    10.0
}

fn default_jitter() -> f64 {
    1e-8
}

impl PriorSpec {
    /// Hyperpriors used in the simulation study.
    pub fn simulation() -> Self {
        let scale = PriorFamily::LogNormal {
            mu: 0.5 * 0.3f64.ln(),
            sigma: 0.1,
        };
        let length = PriorFamily::LogNormal {
            mu: 0.3f64.ln(),
            sigma: 0.2,
        };
        Self {
            coefficients: CoefficientPrior::GaussianProcess,
            sigma_beta: scale,
            phi: length,
            tau: length,
            sigma_theta: scale,
            gamma: length,
            eta: length,
            zeta_sd: default_zeta_sd(),
            tie_gamma_to_phi: false,
            jitter: default_jitter(),
        }
    }

    /// Hyperpriors used in the data application. The lag kernel reuses the
    /// exposure kernel's application priors.
    pub fn application() -> Self {
        let scale = PriorFamily::HalfT {
            nu: 3.0,
            location: 0.0,
            scale: 1.0,
        };
        let length = PriorFamily::LogNormal { mu: 0.0, sigma: 0.6 };
        Self {
            coefficients: CoefficientPrior::GaussianProcess,
            sigma_beta: scale,
            phi: length,
            tau: length,
            sigma_theta: scale,
            gamma: length,
            eta: length,
            zeta_sd: 10.0,
            tie_gamma_to_phi: false,
            jitter: default_jitter(),
        }
    }

    /// Comparator: iid standard-normal coefficients, no hyperparameters.
    pub fn independent_normal() -> Self {
        Self {
            coefficients: CoefficientPrior::IndependentNormal { sd: 1.0 },
            ..Self::simulation()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "simulation" => Some(Self::simulation()),
            "application" => Some(Self::application()),
            "independent-normal" | "indep-normal" => Some(Self::independent_normal()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            &self.sigma_beta,
            &self.phi,
            &self.tau,
            &self.sigma_theta,
            &self.gamma,
            &self.eta,
        ] {
            p.validate()?;
        }
        if !(self.zeta_sd > 0.0) {
            return Err(EdvcmError::Prior("zeta_sd must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(EdvcmError::Prior("jitter must be non-negative".into()));
        }
        if let CoefficientPrior::IndependentNormal { sd } = self.coefficients {
            if !(sd > 0.0) {
                return Err(EdvcmError::Prior("independent-normal sd must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn family(&self, kind: HyperKind) -> &PriorFamily {
        match kind {
            HyperKind::SigmaBeta => &self.sigma_beta,
            HyperKind::Phi => &self.phi,
            HyperKind::Tau => &self.tau,
            HyperKind::SigmaTheta => &self.sigma_theta,
            HyperKind::Gamma => &self.gamma,
            HyperKind::Eta => &self.eta,
        }
    }
}

/// GP hyperparameters, all sampled on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HyperKind {
    SigmaBeta,
    Phi,
    Tau,
    SigmaTheta,
    Gamma,
    Eta,
}

impl HyperKind {
    pub fn name(self) -> &'static str {
        match self {
            HyperKind::SigmaBeta => "sigma_beta",
            HyperKind::Phi => "phi",
            HyperKind::Tau => "tau",
            HyperKind::SigmaTheta => "sigma_theta",
            HyperKind::Gamma => "gamma",
            HyperKind::Eta => "eta",
        }
    }
}

/// Marginal scale and lengthscales of both kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub sigma_beta: f64,
    pub phi: f64,
    pub tau: f64,
    pub sigma_theta: Option<f64>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
}

impl GpHyperparameters {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(EdvcmError::Hyperparameter { name, value: v })
            }
        };
        check("sigma_beta", self.sigma_beta)?;
        check("phi", self.phi)?;
        check("tau", self.tau)?;
        for (name, v) in [
            ("sigma_theta", self.sigma_theta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if let Some(v) = v {
                check(name, v)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, u: f64) -> f64 {
        let h = 1e-5;
        (f(u + h) - f(u - h)) / (2.0 * h)
    }

    #[test]
    fn preset_values() {
        let s = PriorSpec::simulation();
        assert_eq!(s.sigma_beta, PriorFamily::LogNormal { mu: 0.5 * 0.3f64.ln(), sigma: 0.1 });
        assert_eq!(s.phi, PriorFamily::LogNormal { mu: 0.3f64.ln(), sigma: 0.2 });
        assert_eq!(s.eta, PriorFamily::LogNormal { mu: 0.3f64.ln(), sigma: 0.2 });
        let a = PriorSpec::application();
        assert_eq!(a.sigma_beta, PriorFamily::HalfT { nu: 3.0, location: 0.0, scale: 1.0 });
        assert_eq!(a.tau, PriorFamily::LogNormal { mu: 0.0, sigma: 0.6 });
        // N(0, 100) is parameterized by variance
        assert_eq!(a.zeta_sd, 10.0);
    }

    #[test]
    fn log_scale_gradients_match_fd() {
        let fams = [
            PriorFamily::LogNormal { mu: -0.6, sigma: 0.2 },
            PriorFamily::HalfT { nu: 3.0, location: 0.0, scale: 1.0 },
            PriorFamily::HalfT { nu: 5.0, location: 0.5, scale: 2.0 },
            PriorFamily::Normal { mean: 0.2, sd: 0.7 },
        ];
        for f in fams {
            for u in [-1.3, -0.2, 0.4, 1.1] {
                let (_, g) = f.log_density_log_scale(u);
                let num = fd(|x| f.log_density_log_scale(x).0, u);
                assert!((g - num).abs() < 1e-7 * num.abs().max(1.0), "{f:?} {u}");
            }
        }
    }

    #[test]
    fn half_t_density_normalizes() {
        // integrate exp(log density in u) du over the real line = 1
        let f = PriorFamily::HalfT { nu: 3.0, location: 0.0, scale: 1.0 };
        let (lo, hi, n) = (-25.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| f.log_density_log_scale(lo + (i as f64 + 0.5) * h).0.exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn medians() {
        let f = PriorFamily::LogNormal { mu: 0.3f64.ln(), sigma: 0.2 };
        assert!((f.median() - 0.3).abs() < 1e-12);
        let t = PriorFamily::HalfT { nu: 3.0, location: 0.0, scale: 1.0 };
        // 75th percentile of t_3
        assert!((t.median() - 0.764_892_328_8).abs() < 1e-6);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = PriorSpec::application();
        let text = serde_json::to_string(&s).unwrap();
        let back: PriorSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<PriorSpec>(&text.replace("zeta_sd", "zeta_sdx")).is_err());
    }
}
