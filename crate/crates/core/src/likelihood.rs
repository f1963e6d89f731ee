//! Conditional (multinomial) log-likelihood of the stratified Poisson model.
//!
//! Within a stratum the unit probabilities are a softmax of the linear
//! predictors `eta_i = beta[d,t] A_i + theta[d,l] L_i + zeta·Z_i + log P_i`;
//! stratum intercepts cancel.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnalyticDataset, ExposureUnit, Role, Stratum};
use crate::error::{EdvcmError, Result};
use crate::grid::{grid_index, lag_index, CoefficientGrid, LagCoefficientGrid};

/// Coefficients entering the linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub beta: CoefficientGrid,
    pub theta: Option<LagCoefficientGrid>,
    pub zeta: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(max_duration: u32, max_lag: u32, covariate_dim: usize) -> Self {
        Self {
            beta: CoefficientGrid::zeros(max_duration),
            theta: (max_lag > 0).then(|| LagCoefficientGrid::zeros(max_duration, max_lag)),
            zeta: vec![0.0; covariate_dim],
        }
    }

    pub fn for_dataset(dataset: &AnalyticDataset) -> Self {
        Self::zeros(dataset.max_duration, dataset.max_lag, dataset.covariate_dim)
    }

    fn theta_values(&self) -> &[f64] {
        self.theta.as_ref().map_or(&[], |t| t.values())
    }

    fn check(&self, dataset: &AnalyticDataset) -> Result<()> {
        if self.beta.max_duration() < dataset.max_duration {
            return Err(EdvcmError::Dimension {
                context: "beta grid duration",
                expected: dataset.max_duration as usize,
                got: self.beta.max_duration() as usize,
            });
        }
        if dataset.max_lag > 0 {
            match &self.theta {
                Some(t) if t.max_lag() >= dataset.max_lag && t.max_duration() >= dataset.max_duration => {}
                _ => {
                    return Err(EdvcmError::Dimension {
                        context: "theta grid lag horizon",
                        expected: dataset.max_lag as usize,
                        got: self.theta.as_ref().map_or(0, |t| t.max_lag() as usize),
                    })
                }
            }
        }
        if self.zeta.len() != dataset.covariate_dim {
            return Err(EdvcmError::Dimension {
                context: "covariate coefficients",
                expected: dataset.covariate_dim,
                got: self.zeta.len(),
            });
        }
        Ok(())
    }
}

/// Gradient blocks matching [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGradient {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub zeta: Vec<f64>,
}

pub fn unit_linear_predictor(unit: &ExposureUnit, params: &ParameterSet) -> Result<f64> {
    if unit.covariates.len() != params.zeta.len() {
        return Err(EdvcmError::Dimension {
            context: "unit covariates",
            expected: params.zeta.len(),
            got: unit.covariates.len(),
        });
    }
    let mut eta = unit.person_time.ln();
    eta += unit.covariates.iter().zip(&params.zeta).map(|(z, c)| z * c).sum::<f64>();
    match unit.role {
        Role::Exposure => {
            let t = unit.day().expect("exposure unit has a day index");
            eta += params.beta.get(unit.duration, t)?;
        }
        Role::Lag => {
            let l = unit.lag().expect("lag unit has a lag index");
            let theta = params.theta.as_ref().ok_or(EdvcmError::LagIndex {
                d: unit.duration,
                l,
                max_duration: params.beta.max_duration(),
                max_lag: 0,
            })?;
            eta += theta.get(unit.duration, l)?;
        }
        Role::ControlExposure | Role::ControlLag => {}
    }
    Ok(eta)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log pi_i` for every unit of the stratum.
pub fn stratum_log_probabilities(stratum: &Stratum, params: &ParameterSet) -> Result<Vec<f64>> {
    let eta = stratum
        .units
        .iter()
        .map(|u| unit_linear_predictor(u, params))
        .collect::<Result<Vec<_>>>()?;
    if eta.len() < 2 {
        log::warn!("stratum {} has a single unit", stratum.stratum_id);
    }
    let lse = log_sum_exp(&eta);
    Ok(eta.into_iter().map(|e| e - lse).collect())
}

/// Multinomial kernel `sum_s sum_i Y_i log pi_i`; zero-total strata are skipped.
pub fn conditional_log_likelihood(dataset: &AnalyticDataset, params: &ParameterSet) -> Result<f64> {
    params.check(dataset)?;
    let mut total = 0.0;
    for s in dataset.strata.iter().filter(|s| !s.is_zero_total()) {
        let lp = stratum_log_probabilities(s, params)?;
        total += s
            .units
            .iter()
            .zip(&lp)
            .filter(|(u, _)| u.count > 0)
            .map(|(u, l)| u.count as f64 * l)
            .sum::<f64>();
    }
    Ok(total)
}

/// Score `sum_s sum_i (Y_i - W_s pi_i) x_i` for every coefficient.
pub fn log_likelihood_gradient(dataset: &AnalyticDataset, params: &ParameterSet) -> Result<LikelihoodGradient> {
    params.check(dataset)?;
    let compiled = CompiledDataset::new(dataset, params.beta.max_duration(), params.theta.as_ref().map_or(0, |t| t.max_lag()))?;
    let mut grad = LikelihoodGradient {
        beta: vec![0.0; params.beta.values().len()],
        theta: vec![0.0; params.theta_values().len()],
        zeta: vec![0.0; params.zeta.len()],
    };
    compiled.value_and_gradient(
        params.beta.values(),
        params.theta_values(),
        &params.zeta,
        &mut grad.beta,
        &mut grad.theta,
        &mut grad.zeta,
    );
    Ok(grad)
}

const NONE: u32 = u32::MAX;

/// Flattened, merge-compressed dataset for repeated likelihood evaluation.
///
/// Units of a stratum with identical design rows are merged; their counts
/// add and `log_mult` carries the multiplicity into the normalizer.
#[derive(Debug, Clone)]
pub struct CompiledDataset {
    max_duration: u32,
    max_lag: u32,
    covariate_dim: usize,
    /// Unit range per non-empty stratum, with its total count.
    strata: Vec<(usize, usize, f64)>,
    beta_idx: Vec<u32>,
    theta_idx: Vec<u32>,
    offset: Vec<f64>,
    log_mult: Vec<f64>,
    mult: Vec<f64>,
    count: Vec<f64>,
    covariates: Vec<f64>,
}

impl CompiledDataset {
    pub fn new(dataset: &AnalyticDataset, max_duration: u32, max_lag: u32) -> Result<Self> {
        let k = dataset.covariate_dim;
        let mut out = Self {
            max_duration,
            max_lag,
            covariate_dim: k,
            strata: Vec::new(),
            beta_idx: Vec::new(),
            theta_idx: Vec::new(),
            offset: Vec::new(),
            log_mult: Vec::new(),
            mult: Vec::new(),
            count: Vec::new(),
            covariates: Vec::new(),
        };
        // Strata with identical design rows share one normalizer shape, so
        // their counts and totals are pooled.
        let mut by_design: HashMap<Vec<u64>, usize> = HashMap::new();
        for s in dataset.strata.iter().filter(|s| !s.is_zero_total()) {
            let start = out.beta_idx.len();
            for u in &s.units {
                let (b, t) = match u.role {
                    Role::Exposure => (grid_index(u.duration, u.day().unwrap(), max_duration)? as u32, NONE),
                    Role::Lag => (NONE, lag_index(u.duration, u.lag().unwrap(), max_duration, max_lag)? as u32),
                    _ => (NONE, NONE),
                };
                let off = u.person_time.ln();
                let existing = (start..out.beta_idx.len()).find(|&j| {
                    out.beta_idx[j] == b
                        && out.theta_idx[j] == t
                        && out.offset[j] == off
                        && out.covariates[j * k..(j + 1) * k] == u.covariates[..]
                });
                match existing {
                    Some(j) => {
                        out.mult[j] += 1.0;
                        out.count[j] += u.count as f64;
                    }
                    None => {
                        out.beta_idx.push(b);
                        out.theta_idx.push(t);
                        out.offset.push(off);
                        out.mult.push(1.0);
                        out.count.push(u.count as f64);
                        out.covariates.extend_from_slice(&u.covariates);
                    }
                }
            }
            let end = out.beta_idx.len();
            let mut key = Vec::with_capacity((end - start) * (4 + k));
            for j in start..end {
                key.push(out.beta_idx[j] as u64);
                key.push(out.theta_idx[j] as u64);
                key.push(out.offset[j].to_bits());
                key.push(out.mult[j].to_bits());
                key.extend(out.covariates[j * k..(j + 1) * k].iter().map(|c| c.to_bits()));
            }
            match by_design.get(&key) {
                Some(&si) => {
                    let (ps, _, total) = &mut out.strata[si];
                    *total += s.total as f64;
                    let ps = *ps;
                    for j in start..end {
                        let c = out.count[j];
                        out.count[ps + j - start] += c;
                    }
                    out.beta_idx.truncate(start);
                    out.theta_idx.truncate(start);
                    out.offset.truncate(start);
                    out.mult.truncate(start);
                    out.count.truncate(start);
                    out.covariates.truncate(start * k);
                }
                None => {
                    by_design.insert(key, out.strata.len());
                    out.strata.push((start, end, s.total as f64));
                }
            }
        }
        out.log_mult = out.mult.iter().map(|m| m.ln()).collect();
        Ok(out)
    }

    pub fn max_duration(&self) -> u32 {
        self.max_duration
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate_dim
    }

    fn eta(&self, j: usize, beta: &[f64], theta: &[f64], zeta: &[f64]) -> f64 {
        let mut e = self.offset[j];
        let b = self.beta_idx[j];
        if b != NONE {
            e += beta[b as usize];
        }
        let t = self.theta_idx[j];
        if t != NONE {
            e += theta[t as usize];
        }
        if self.covariate_dim > 0 {
            let k = self.covariate_dim;
            e += self.covariates[j * k..(j + 1) * k]
                .iter()
                .zip(zeta)
                .map(|(z, c)| z * c)
                .sum::<f64>();
        }
        e
    }

    pub fn value(&self, beta: &[f64], theta: &[f64], zeta: &[f64]) -> f64 {
        let mut eta = Vec::new();
        let mut total = 0.0;
        for &(start, end, _) in &self.strata {
            eta.clear();
            eta.extend((start..end).map(|j| self.eta(j, beta, theta, zeta)));
            let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = eta
                .iter()
                .zip(&self.log_mult[start..end])
                .map(|(e, lm)| (e + lm - max).exp())
                .sum();
            let lse = max + norm.ln();
            total += eta
                .iter()
                .zip(&self.count[start..end])
                .filter(|(_, &c)| c > 0.0)
                .map(|(e, c)| c * (e - lse))
                .sum::<f64>();
        }
        total
    }

    /// Log-likelihood; gradients are accumulated (added) into the outputs.
    pub fn value_and_gradient(
        &self,
        beta: &[f64],
        theta: &[f64],
        zeta: &[f64],
        g_beta: &mut [f64],
        g_theta: &mut [f64],
        g_zeta: &mut [f64],
    ) -> f64 {
        let k = self.covariate_dim;
        let mut eta = Vec::new();
        let mut weight = Vec::new();
        let mut total = 0.0;
        for &(start, end, w) in &self.strata {
            eta.clear();
            eta.extend((start..end).map(|j| self.eta(j, beta, theta, zeta)));
            let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            weight.clear();
            weight.extend(
                eta.iter()
                    .zip(&self.log_mult[start..end])
                    .map(|(e, lm)| (e + lm - max).exp()),
            );
            let norm: f64 = weight.iter().sum();
            let lse = max + norm.ln();
            for (off, (e, wt)) in eta.iter().zip(&weight).enumerate() {
                let j = start + off;
                let c = self.count[j];
                if c > 0.0 {
                    total += c * (e - lse);
                }
                let p = wt / norm;
                let r = c - w * p;
                let b = self.beta_idx[j];
                if b != NONE {
                    g_beta[b as usize] += r;
                }
                let t = self.theta_idx[j];
                if t != NONE {
                    g_theta[t as usize] += r;
                }
                if k > 0 {
                    for (g, z) in g_zeta.iter_mut().zip(&self.covariates[j * k..(j + 1) * k]) {
                        *g += r * z;
                    }
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{validate_dataset, RawUnit};

    fn unit(stratum: &str, d: u32, t: Option<u32>, l: Option<u32>, a: u8, lag: u8, y: u64, p: f64, z: Vec<f64>) -> RawUnit {
        RawUnit {
            unit_id: format!("{stratum}-{d}-{t:?}-{l:?}-{a}-{lag}-{y}"),
            stratum_id: stratum.into(),
            duration: d,
            day: t,
            lag: l,
            exposed: a,
            lag_indicator: lag,
            count: y,
            person_time: p,
            covariates: z,
        }
    }

    #[test]
    fn predictor_examples() {
        let ds = validate_dataset(vec![
            unit("s", 3, Some(1), None, 0, 0, 1, 1.0, vec![]),
            unit("s", 3, Some(1), None, 1, 0, 1, 1.0, vec![]),
        ])
        .unwrap();
        let mut p = ParameterSet::for_dataset(&ds);
        assert_eq!(unit_linear_predictor(&ds.strata[0].units[0], &p).unwrap(), 0.0);

        let ds2 = validate_dataset(vec![unit("s", 2, Some(1), None, 1, 0, 1, 1.0, vec![])]).unwrap();
        let mut p2 = ParameterSet::zeros(2, 0, 0);
        p2.beta.set(2, 1, 2f64.ln()).unwrap();
        assert_eq!(unit_linear_predictor(&ds2.strata[0].units[0], &p2).unwrap(), 2f64.ln());

        let ds3 = validate_dataset(vec![unit("s", 3, None, Some(2), 0, 1, 1, 2.0, vec![1.0, -1.0])]).unwrap();
        let mut p3 = ParameterSet::zeros(3, 2, 2);
        p3.theta.as_mut().unwrap().set(3, 2, 0.5).unwrap();
        p3.zeta = vec![0.1, 0.2];
        let eta = unit_linear_predictor(&ds3.strata[0].units[0], &p3).unwrap();
        assert!((eta - (0.5 + 0.1 - 0.2 + 2f64.ln())).abs() < 1e-15);

        p.zeta = vec![];
        assert!(unit_linear_predictor(&ds3.strata[0].units[0], &p).is_err());
    }

    #[test]
    fn probability_examples() {
        let ds = validate_dataset(vec![
            unit("s", 1, Some(1), None, 1, 0, 1, 1.0, vec![]),
            unit("s", 1, Some(1), None, 0, 0, 1, 1.0, vec![]),
        ])
        .unwrap();
        let mut p = ParameterSet::for_dataset(&ds);
        let lp = stratum_log_probabilities(&ds.strata[0], &p).unwrap();
        assert_eq!(lp, vec![0.5f64.ln(), 0.5f64.ln()]);
        assert!((conditional_log_likelihood(&ds, &p).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);

        p.beta.set(1, 1, 2f64.ln()).unwrap();
        let lp = stratum_log_probabilities(&ds.strata[0], &p).unwrap();
        assert!((lp[0].exp() - 2.0 / 3.0).abs() < 1e-15);
        assert!((lp[1].exp() - 1.0 / 3.0).abs() < 1e-15);
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_invariance() {
        let mk = |p: f64| {
            validate_dataset(vec![
                unit("s", 2, Some(1), None, 1, 0, 3, p, vec![0.3]),
                unit("s", 2, Some(2), None, 0, 0, 5, p, vec![-0.1]),
                unit("s", 2, Some(1), None, 0, 0, 1, p, vec![0.9]),
            ])
            .unwrap()
        };
        let mut params = ParameterSet::zeros(2, 0, 1);
        params.beta.set(2, 1, 0.4).unwrap();
        params.zeta = vec![0.7];
        let a = stratum_log_probabilities(&mk(1.0).strata[0], &params).unwrap();
        let b = stratum_log_probabilities(&mk(123.0).strata[0], &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_counts() {
        let ds = validate_dataset(vec![
            unit("s", 2, Some(1), None, 1, 0, 0, 1.0, vec![]),
            unit("s", 2, Some(1), None, 0, 0, 0, 1.0, vec![]),
        ])
        .unwrap();
        let mut p = ParameterSet::for_dataset(&ds);
        p.beta.values_mut().iter_mut().for_each(|v| *v = 0.37);
        assert_eq!(conditional_log_likelihood(&ds, &p).unwrap(), 0.0);
        let g = log_likelihood_gradient(&ds, &p).unwrap();
        assert!(g.beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_duration_has_zero_gradient() {
        let ds = validate_dataset(vec![
            unit("s", 3, Some(1), None, 1, 0, 4, 1.0, vec![]),
            unit("s", 3, Some(1), None, 0, 0, 2, 1.0, vec![]),
        ])
        .unwrap();
        let p = ParameterSet::for_dataset(&ds);
        let g = log_likelihood_gradient(&ds, &p).unwrap();
        for d in 1..=2u32 {
            for t in 1..=d {
                assert_eq!(g.beta[grid_index(d, t, 3).unwrap()], 0.0);
            }
        }
        assert!(g.beta[grid_index(3, 1, 3).unwrap()] > 0.0);
    }

    #[test]
    fn compiled_value_matches_direct() {
        let ds = validate_dataset(vec![
            unit("a", 2, Some(1), None, 1, 0, 3, 2.0, vec![0.3]),
            unit("a", 2, Some(1), None, 0, 0, 1, 2.0, vec![0.3]),
            unit("a", 2, Some(1), None, 0, 0, 2, 2.0, vec![0.3]),
            unit("a", 2, None, Some(1), 0, 1, 2, 2.0, vec![0.1]),
            unit("a", 2, None, Some(1), 0, 0, 0, 2.0, vec![0.1]),
            unit("b", 1, Some(1), None, 1, 0, 0, 1.5, vec![1.0]),
            unit("b", 1, Some(1), None, 0, 0, 0, 1.5, vec![-1.0]),
        ])
        .unwrap();
        let mut p = ParameterSet::for_dataset(&ds);
        p.beta.values_mut().copy_from_slice(&[0.2, -0.3, 0.5]);
        p.theta.as_mut().unwrap().values_mut().copy_from_slice(&[0.1, 0.4]);
        p.zeta = vec![0.25];
        let c = CompiledDataset::new(&ds, 2, 1).unwrap();
        let direct = conditional_log_likelihood(&ds, &p).unwrap();
        let fast = c.value(p.beta.values(), p.theta.as_ref().unwrap().values(), &p.zeta);
        assert!((direct - fast).abs() < 1e-12, "{direct} {fast}");
    }

    #[test]
    fn pooled_strata_match_direct() {
        let mut raw = Vec::new();
        for (s, counts) in [("s1", [4, 1, 2]), ("s2", [0, 3, 3]), ("s3", [1, 0, 0])] {
            raw.push(unit(s, 1, Some(1), None, 1, 0, counts[0], 1.0, vec![]));
            raw.push(unit(s, 1, Some(1), None, 0, 0, counts[1], 1.0, vec![]));
            raw.push(unit(s, 1, Some(1), None, 0, 0, counts[2], 1.0, vec![]));
        }
        // same shape but different person-time: not pooled
        raw.push(unit("s4", 1, Some(1), None, 1, 0, 2, 3.0, vec![]));
        raw.push(unit("s4", 1, Some(1), None, 0, 0, 1, 1.0, vec![]));
        let ds = validate_dataset(raw).unwrap();
        let c = CompiledDataset::new(&ds, 1, 0).unwrap();
        assert_eq!(c.strata.len(), 2);
        let mut p = ParameterSet::for_dataset(&ds);
        p.beta.values_mut()[0] = 0.7;
        let direct = conditional_log_likelihood(&ds, &p).unwrap();
        let grad = log_likelihood_gradient(&ds, &p).unwrap();
        let mut gb = vec![0.0];
        let fast = c.value_and_gradient(p.beta.values(), &[], &[], &mut gb, &mut [], &mut []);
        assert!((direct - fast).abs() < 1e-12);
        assert!((grad.beta[0] - gb[0]).abs() < 1e-12);
    }
}
