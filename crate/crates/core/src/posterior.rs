//! Joint log posterior over the unconstrained parameter vector.
//!
//! Layout: `[z_beta | z_theta | zeta | log hyperparameters]`. Under the GP
//! prior `beta = L_beta z_beta` (likewise theta); under the independent
//! normal comparator `beta = sd * z_beta` and there are no hyperparameters.

use rand::Rng;

use crate::dataset::AnalyticDataset;
use crate::error::{EdvcmError, Result};
use crate::gp::{GpFactor, KernelSpec};
use crate::grid::{lag_cells, triangle_cells, triangle_len, CoefficientGrid, LagCoefficientGrid};
use crate::likelihood::{CompiledDataset, ParameterSet};
use crate::priors::{CoefficientPrior, HyperKind, PriorSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Where each block lives in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub max_duration: u32,
    pub max_lag: u32,
    pub n_beta: usize,
    pub n_theta: usize,
    pub n_zeta: usize,
    pub hypers: Vec<HyperKind>,
}

impl ParameterLayout {
    pub fn new(max_duration: u32, max_lag: u32, covariate_dim: usize, prior: &PriorSpec) -> Self {
        let n_theta = max_duration as usize * max_lag as usize;
        let mut hypers = Vec::new();
        if prior.coefficients == CoefficientPrior::GaussianProcess {
            hypers.extend([HyperKind::SigmaBeta, HyperKind::Phi, HyperKind::Tau]);
            if n_theta > 0 {
                hypers.push(HyperKind::SigmaTheta);
                if !prior.tie_gamma_to_phi {
                    hypers.push(HyperKind::Gamma);
                }
                hypers.push(HyperKind::Eta);
            }
        }
        Self {
            max_duration,
            max_lag,
            n_beta: triangle_len(max_duration),
            n_theta,
            n_zeta: covariate_dim,
            hypers,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_beta + self.n_theta + self.n_zeta + self.hypers.len()
    }

    pub fn theta_offset(&self) -> usize {
        self.n_beta
    }

    pub fn zeta_offset(&self) -> usize {
        self.n_beta + self.n_theta
    }

    pub fn hyper_offset(&self) -> usize {
        self.n_beta + self.n_theta + self.n_zeta
    }

    pub fn hyper_position(&self, kind: HyperKind) -> Option<usize> {
        self.hypers.iter().position(|&k| k == kind).map(|p| self.hyper_offset() + p)
    }

    fn coefficient_names(&self, prefix: &str) -> Vec<String> {
        let mut names: Vec<String> = triangle_cells(self.max_duration)
            .into_iter()
            .map(|(d, t)| format!("{prefix}beta[{d},{t}]"))
            .collect();
        if self.max_lag > 0 {
            names.extend(
                lag_cells(self.max_duration, self.max_lag)
                    .into_iter()
                    .map(|(d, l)| format!("{prefix}theta[{d},{l}]")),
            );
        }
        names.extend((1..=self.n_zeta).map(|k| format!("zeta[{k}]")));
        names
    }

    /// Names of the sampled (unconstrained) coordinates.
    pub fn unconstrained_names(&self) -> Vec<String> {
        let mut names = self.coefficient_names("z_");
        names.extend(self.hypers.iter().map(|h| format!("log_{}", h.name())));
        names
    }

    /// Names of the natural-scale parameters returned by [`Posterior::constrain`].
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = self.coefficient_names("");
        names.extend(self.hypers.iter().map(|h| h.name().to_string()));
        names
    }
}

/// Target density for the sampler.
#[derive(Debug, Clone)]
pub struct Posterior {
    data: CompiledDataset,
    layout: ParameterLayout,
    prior: PriorSpec,
    beta_kernel: KernelSpec,
    theta_kernel: KernelSpec,
}

struct Coefficients {
    beta: Vec<f64>,
    theta: Vec<f64>,
    beta_gp: Option<GpFactor>,
    theta_gp: Option<GpFactor>,
}

impl Posterior {
    pub fn new(dataset: &AnalyticDataset, prior: &PriorSpec) -> Result<Self> {
        prior.validate()?;
        if dataset.max_duration < 1 {
            return Err(EdvcmError::Empty("dataset has no durations"));
        }
        let data = CompiledDataset::new(dataset, dataset.max_duration, dataset.max_lag)?;
        let layout = ParameterLayout::new(dataset.max_duration, dataset.max_lag, dataset.covariate_dim, prior);
        Ok(Self {
            data,
            beta_kernel: KernelSpec::exposure(dataset.max_duration, prior.jitter),
            theta_kernel: KernelSpec::lag(dataset.max_duration, dataset.max_lag, prior.jitter),
            layout,
            prior: prior.clone(),
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn hyper(&self, q: &[f64], kind: HyperKind) -> f64 {
        let kind = if kind == HyperKind::Gamma && self.prior.tie_gamma_to_phi {
            HyperKind::Phi
        } else {
            kind
        };
        q[self.layout.hyper_position(kind).expect("hyperparameter in layout")].exp()
    }

    fn coefficients(&self, q: &[f64]) -> Result<Coefficients> {
        let lay = &self.layout;
        let z_beta = &q[..lay.n_beta];
        let z_theta = &q[lay.theta_offset()..lay.zeta_offset()];
        match self.prior.coefficients {
            CoefficientPrior::IndependentNormal { sd } => Ok(Coefficients {
                beta: z_beta.iter().map(|z| sd * z).collect(),
                theta: z_theta.iter().map(|z| sd * z).collect(),
                beta_gp: None,
                theta_gp: None,
            }),
            CoefficientPrior::GaussianProcess => {
                let bgp = GpFactor::new(
                    &self.beta_kernel,
                    self.hyper(q, HyperKind::SigmaBeta),
                    self.hyper(q, HyperKind::Phi),
                    self.hyper(q, HyperKind::Tau),
                )?;
                let beta = bgp.transform(z_beta);
                let (theta, tgp) = if lay.n_theta > 0 {
                    let tgp = GpFactor::new(
                        &self.theta_kernel,
                        self.hyper(q, HyperKind::SigmaTheta),
                        self.hyper(q, HyperKind::Gamma),
                        self.hyper(q, HyperKind::Eta),
                    )?;
                    (tgp.transform(z_theta), Some(tgp))
                } else {
                    (Vec::new(), None)
                };
                Ok(Coefficients {
                    beta,
                    theta,
                    beta_gp: Some(bgp),
                    theta_gp: tgp,
                })
            }
        }
    }

    /// Log posterior (up to a constant) and its gradient in `q`.
    pub fn log_posterior(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.dim()];
        let v = self.log_posterior_into(q, &mut grad)?;
        Ok((v, grad))
    }

    /// As [`Posterior::log_posterior`], writing the gradient into `grad`.
    pub fn log_posterior_into(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        let lay = &self.layout;
        if q.len() != lay.dim() || grad.len() != lay.dim() {
            return Err(EdvcmError::Dimension {
                context: "posterior parameter vector",
                expected: lay.dim(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(EdvcmError::NonFinite("parameter vector".into()));
        }
        let coef = self.coefficients(q)?;
        let zeta = &q[lay.zeta_offset()..lay.hyper_offset()];

        let mut g_beta = vec![0.0; lay.n_beta];
        let mut g_theta = vec![0.0; lay.n_theta];
        let mut g_zeta = vec![0.0; lay.n_zeta];
        let mut value = self
            .data
            .value_and_gradient(&coef.beta, &coef.theta, zeta, &mut g_beta, &mut g_theta, &mut g_zeta);

        grad.iter_mut().for_each(|g| *g = 0.0);
        let (zb, zt) = (&q[..lay.n_beta], &q[lay.theta_offset()..lay.zeta_offset()]);
        match (&coef.beta_gp, self.prior.coefficients) {
            (Some(bgp), _) => {
                let gb = bgp.backprop(zb, &coef.beta, &g_beta);
                grad[..lay.n_beta].copy_from_slice(&gb.z);
                self.add_hyper(grad, HyperKind::SigmaBeta, gb.log_sigma);
                self.add_hyper(grad, HyperKind::Phi, gb.log_len_a);
                self.add_hyper(grad, HyperKind::Tau, gb.log_len_b);
                if let Some(tgp) = &coef.theta_gp {
                    let gt = tgp.backprop(zt, &coef.theta, &g_theta);
                    grad[lay.theta_offset()..lay.zeta_offset()].copy_from_slice(&gt.z);
                    self.add_hyper(grad, HyperKind::SigmaTheta, gt.log_sigma);
                    self.add_hyper(grad, HyperKind::Gamma, gt.log_len_a);
                    self.add_hyper(grad, HyperKind::Eta, gt.log_len_b);
                }
            }
            (None, CoefficientPrior::IndependentNormal { sd }) => {
                for (g, gb) in grad[..lay.zeta_offset()].iter_mut().zip(g_beta.iter().chain(&g_theta)) {
                    *g = sd * gb;
                }
            }
            (None, CoefficientPrior::GaussianProcess) => unreachable!("GP factor always built"),
        }
        for (g, gz) in grad[lay.zeta_offset()..lay.hyper_offset()].iter_mut().zip(&g_zeta) {
            *g = *gz;
        }

        // whitened coefficients ~ N(0, 1)
        let n_z = lay.zeta_offset();
        value -= 0.5 * n_z as f64 * LN_2PI;
        for i in 0..n_z {
            value -= 0.5 * q[i] * q[i];
            grad[i] -= q[i];
        }
        let zsd = self.prior.zeta_sd;
        for i in lay.zeta_offset()..lay.hyper_offset() {
            let r = q[i] / zsd;
            value -= 0.5 * LN_2PI + zsd.ln() + 0.5 * r * r;
            grad[i] -= r / zsd;
        }
        for (p, &kind) in lay.hypers.iter().enumerate() {
            let i = lay.hyper_offset() + p;
            let (v, g) = self.prior.family(kind).log_density_log_scale(q[i]);
            value += v;
            grad[i] += g;
        }

        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(EdvcmError::NonFinite(format!("log posterior = {value}")));
        }
        Ok(value)
    }

    fn add_hyper(&self, grad: &mut [f64], kind: HyperKind, g: f64) {
        let kind = if kind == HyperKind::Gamma && self.prior.tie_gamma_to_phi {
            HyperKind::Phi
        } else {
            kind
        };
        if let Some(i) = self.layout.hyper_position(kind) {
            grad[i] += g;
        }
    }

    /// Natural-scale parameters in [`ParameterLayout::constrained_names`] order.
    pub fn constrain(&self, q: &[f64]) -> Result<Vec<f64>> {
        let lay = &self.layout;
        let coef = self.coefficients(q)?;
        let mut out = coef.beta;
        out.extend(coef.theta);
        out.extend_from_slice(&q[lay.zeta_offset()..lay.hyper_offset()]);
        out.extend(q[lay.hyper_offset()..].iter().map(|u| u.exp()));
        Ok(out)
    }

    /// Coefficients of a constrained draw as a [`ParameterSet`].
    pub fn parameter_set(&self, constrained: &[f64]) -> Result<ParameterSet> {
        let lay = &self.layout;
        Ok(ParameterSet {
            beta: CoefficientGrid::new(lay.max_duration, constrained[..lay.n_beta].to_vec())?,
            theta: if lay.n_theta > 0 {
                Some(LagCoefficientGrid::new(
                    lay.max_duration,
                    lay.max_lag,
                    constrained[lay.theta_offset()..lay.zeta_offset()].to_vec(),
                )?)
            } else {
                None
            },
            zeta: constrained[lay.zeta_offset()..lay.hyper_offset()].to_vec(),
        })
    }

    /// Coefficient blocks uniform on (-0.5, 0.5); hyperparameters at their prior medians.
    pub fn initial_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let lay = &self.layout;
        let mut q: Vec<f64> = (0..lay.hyper_offset()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        q.extend(lay.hypers.iter().map(|&k| self.prior.family(k).median().ln()));
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{validate_dataset, RawUnit};

    fn tiny() -> AnalyticDataset {
        let mk = |s: &str, t: Option<u32>, l: Option<u32>, a: u8, lag: u8, y: u64| RawUnit {
            unit_id: format!("{s}{t:?}{l:?}{a}{lag}{y}"),
            stratum_id: s.into(),
            duration: 2,
            day: t,
            lag: l,
            exposed: a,
            lag_indicator: lag,
            count: y,
            person_time: 1.0,
            covariates: vec![0.5],
        };
        validate_dataset(vec![
            mk("a", Some(1), None, 1, 0, 5),
            mk("a", Some(2), None, 1, 0, 3),
            mk("a", Some(1), None, 0, 0, 2),
            mk("a", Some(2), None, 0, 0, 4),
            mk("a", None, Some(1), 0, 1, 1),
            mk("a", None, Some(1), 0, 0, 2),
        ])
        .unwrap()
    }

    #[test]
    fn layout_names() {
        let prior = PriorSpec::simulation();
        let lay = ParameterLayout::new(2, 1, 1, &prior);
        assert_eq!(lay.dim(), 3 + 2 + 1 + 6);
        let names = lay.constrained_names();
        assert_eq!(names[0], "beta[1,1]");
        assert_eq!(names[3], "theta[1,1]");
        assert_eq!(names[5], "zeta[1]");
        assert_eq!(&names[6..], ["sigma_beta", "phi", "tau", "sigma_theta", "gamma", "eta"]);
        let mut tied = prior.clone();
        tied.tie_gamma_to_phi = true;
        assert_eq!(ParameterLayout::new(2, 1, 1, &tied).hypers.len(), 5);
        assert!(ParameterLayout::new(2, 1, 1, &PriorSpec::independent_normal()).hypers.is_empty());
    }

    #[test]
    fn gradient_matches_fd_all_modes() {
        let ds = tiny();
        let mut tied = PriorSpec::simulation();
        tied.tie_gamma_to_phi = true;
        for prior in [PriorSpec::simulation(), PriorSpec::application(), tied, PriorSpec::independent_normal()] {
            let post = Posterior::new(&ds, &prior).unwrap();
            let q: Vec<f64> = (0..post.dim()).map(|i| 0.1 * ((i * 7 % 11) as f64 - 5.0)).collect();
            let (_, g) = post.log_posterior(&q).unwrap();
            let h = 1e-5;
            for i in 0..q.len() {
                let mut qp = q.clone();
                qp[i] += h;
                let mut qm = q.clone();
                qm[i] -= h;
                let fd = (post.log_posterior(&qp).unwrap().0 - post.log_posterior(&qm).unwrap().0) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{prior:?} coord {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let post = Posterior::new(&tiny(), &PriorSpec::simulation()).unwrap();
        assert!(post.log_posterior(&[0.0; 3]).is_err());
        let mut q = vec![0.0; post.dim()];
        q[0] = f64::NAN;
        assert!(matches!(post.log_posterior(&q), Err(EdvcmError::NonFinite(_))));
    }
}
