//! Posterior summaries: percentile intervals, rate ratios and cumulative rate ratios.

use serde::{Deserialize, Serialize};

use crate::dataset::{AnalyticDataset, Role};
use crate::error::{EdvcmError, Result};
use crate::grid::{grid_index, triangle_len, CoefficientGrid};
use crate::hmc::PosteriorDraws;

/// Posterior mean and equal-tailed percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Linear-interpolation (type 7) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn posterior_mean_ci(draws: &[f64], level: f64) -> Result<Interval> {
    if draws.is_empty() {
        return Err(EdvcmError::Empty("posterior draws"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EdvcmError::Config(format!("credible level must lie in (0, 1), got {level}")));
    }
    if draws.iter().any(|x| x.is_nan()) {
        return Err(EdvcmError::NonFinite("posterior draws contain NaN".into()));
    }
    if draws.len() < 100 {
        log::warn!("percentile interval from only {} draws", draws.len());
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        mean: draws.iter().sum::<f64>() / draws.len() as f64,
        lower: quantile_sorted(&sorted, alpha),
        upper: quantile_sorted(&sorted, 1.0 - alpha),
    })
}

/// Exponentiated draws and their summary. Interval endpoints are the
/// exponentiated endpoints of the coefficient interval.
pub fn rate_ratio(beta_draws: &[f64], level: f64) -> Result<(Vec<f64>, Interval)> {
    let rr: Vec<f64> = beta_draws.iter().map(|b| b.exp()).collect();
    let b = posterior_mean_ci(beta_draws, level)?;
    let mean = rr.iter().sum::<f64>() / rr.len() as f64;
    Ok((
        rr,
        Interval {
            mean,
            lower: b.lower.exp(),
            upper: b.upper.exp(),
        },
    ))
}

/// Average of the exponentiated coefficients of duration `d`.
pub fn cumulative_rr_no_covariates(beta: &CoefficientGrid, d: u32) -> Result<f64> {
    let row = beta.row(d)?;
    Ok(row.iter().map(|b| b.exp()).sum::<f64>() / d as f64)
}

/// Covariate weights `exp(ζᵀz_i)` of the exposed units of one duration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposedCovariates {
    pub duration: u32,
    /// `(t, z_i)` for every exposed unit with `d(i) = duration`.
    pub units: Vec<(u32, Vec<f64>)>,
}

impl ExposedCovariates {
    pub fn from_dataset(dataset: &AnalyticDataset, d: u32) -> Result<Self> {
        let units: Vec<(u32, Vec<f64>)> = dataset
            .units()
            .filter(|u| u.role == Role::Exposure && u.duration == d)
            .filter_map(|u| u.day().map(|t| (t, u.covariates.clone())))
            .collect();
        if units.is_empty() {
            return Err(EdvcmError::Empty("exposed units of the requested duration"));
        }
        Ok(Self { duration: d, units })
    }

    /// Covariate-weighted average of `exp(β_{d,t(i)})`.
    pub fn cumulative_rr(&self, beta: &CoefficientGrid, zeta: &[f64]) -> Result<f64> {
        let row = beta.row(self.duration)?;
        let (mut num, mut den) = (0.0, 0.0);
        let lps = self
            .units
            .iter()
            .map(|(_, z)| linear(zeta, z))
            .collect::<Result<Vec<_>>>()?;
        let shift = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for ((t, _), lp) in self.units.iter().zip(&lps) {
            let w = (lp - shift).exp();
            num += w * row[*t as usize - 1].exp();
            den += w;
        }
        Ok(num / den)
    }
}

fn linear(zeta: &[f64], z: &[f64]) -> Result<f64> {
    if zeta.len() != z.len() {
        return Err(EdvcmError::Dimension {
            context: "covariate vector",
            expected: zeta.len(),
            got: z.len(),
        });
    }
    Ok(zeta.iter().zip(z).map(|(a, b)| a * b).sum())
}

pub fn cumulative_rr_with_covariates(
    beta: &CoefficientGrid,
    zeta: &[f64],
    d: u32,
    dataset: &AnalyticDataset,
) -> Result<f64> {
    ExposedCovariates::from_dataset(dataset, d)?.cumulative_rr(beta, zeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Protective,
    Harmful,
    Null,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Protective => "protective",
            Direction::Harmful => "harmful",
            Direction::Null => "null",
        }
    }
}

/// Classify a rate-ratio interval relative to 1.
pub fn classify_direction(rr: &Interval) -> Direction {
    if rr.lower > 1.0 {
        Direction::Harmful
    } else if rr.upper < 1.0 {
        Direction::Protective
    } else {
        Direction::Null
    }
}

/// Parsed constrained parameter name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParameterName<'a> {
    Beta(u32, u32),
    Theta(u32, u32),
    Zeta(usize),
    Other(&'a str),
}

pub fn parse_parameter_name(name: &str) -> ParameterName<'_> {
    let pair = |s: &str| -> Option<(u32, u32)> {
        let (a, b) = s.strip_suffix(']')?.split_once(',')?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    };
    if let Some(rest) = name.strip_prefix("beta[") {
        if let Some((d, t)) = pair(rest) {
            return ParameterName::Beta(d, t);
        }
    }
    if let Some(rest) = name.strip_prefix("theta[") {
        if let Some((d, l)) = pair(rest) {
            return ParameterName::Theta(d, l);
        }
    }
    if let Some(k) = name.strip_prefix("zeta[").and_then(|r| r.strip_suffix(']')).and_then(|k| k.parse().ok()) {
        return ParameterName::Zeta(k);
    }
    ParameterName::Other(name)
}

/// One row of a posterior summary table. For coefficients the interval is
/// on the rate-ratio scale; otherwise it is on the parameter's own scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub d: Option<u32>,
    pub t_or_l: Option<u32>,
    pub mean: f64,
    pub rr_mean: Option<f64>,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub direction: Option<Direction>,
}

pub fn summarize(draws: &PosteriorDraws, level: f64) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(draws.n_params());
    for (p, name) in draws.names.iter().enumerate() {
        let x = draws.column(p);
        let (d, t_or_l, is_coef) = match parse_parameter_name(name) {
            ParameterName::Beta(d, t) => (Some(d), Some(t), true),
            ParameterName::Theta(d, l) => (Some(d), Some(l), true),
            _ => (None, None, false),
        };
        let s = posterior_mean_ci(&x, level)?;
        let row = if is_coef {
            let (_, rr) = rate_ratio(&x, level)?;
            SummaryRow {
                parameter: name.clone(),
                d,
                t_or_l,
                mean: s.mean,
                rr_mean: Some(rr.mean),
                ci_lo: rr.lower,
                ci_hi: rr.upper,
                direction: Some(classify_direction(&rr)),
            }
        } else {
            SummaryRow {
                parameter: name.clone(),
                d,
                t_or_l,
                mean: s.mean,
                rr_mean: None,
                ci_lo: s.lower,
                ci_hi: s.upper,
                direction: None,
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Which cumulative formula produced a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CumulativeMethod {
    Unweighted,
    CovariateWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub d: u32,
    pub method: CumulativeMethod,
    pub interval: Interval,
    pub direction: Direction,
}

/// Per-draw beta grids and zeta vectors extracted from stacked draws.
pub struct DrawAccessor<'a> {
    draws: &'a PosteriorDraws,
    max_duration: u32,
    beta_cols: Vec<usize>,
    zeta_cols: Vec<usize>,
}

impl<'a> DrawAccessor<'a> {
    pub fn new(draws: &'a PosteriorDraws) -> Result<Self> {
        let mut cells = Vec::new();
        let mut zeta_cols = Vec::new();
        for (p, name) in draws.names.iter().enumerate() {
            match parse_parameter_name(name) {
                ParameterName::Beta(d, t) => cells.push((d, t, p)),
                ParameterName::Zeta(_) => zeta_cols.push(p),
                _ => {}
            }
        }
        let max_duration = cells.iter().map(|c| c.0).max().ok_or(EdvcmError::Empty("beta draws"))?;
        if cells.len() != triangle_len(max_duration) {
            return Err(EdvcmError::Dimension {
                context: "beta columns",
                expected: triangle_len(max_duration),
                got: cells.len(),
            });
        }
        let mut beta_cols = vec![0; cells.len()];
        for (d, t, p) in cells {
            beta_cols[grid_index(d, t, max_duration)?] = p;
        }
        Ok(Self {
            draws,
            max_duration,
            beta_cols,
            zeta_cols,
        })
    }

    pub fn max_duration(&self) -> u32 {
        self.max_duration
    }

    pub fn beta(&self, r: usize) -> CoefficientGrid {
        let row = self.draws.row(r);
        let values = self.beta_cols.iter().map(|&p| row[p]).collect();
        CoefficientGrid::new(self.max_duration, values).expect("column count checked at construction")
    }

    pub fn zeta(&self, r: usize) -> Vec<f64> {
        let row = self.draws.row(r);
        self.zeta_cols.iter().map(|&p| row[p]).collect()
    }
}

/// Cumulative rate ratio per duration `1..=D`, computed per draw.
///
/// With covariates in the model, durations having exposed units in
/// `dataset` use the covariate-weighted formula; the rest use the
/// unweighted average.
pub fn cumulative_table(
    draws: &PosteriorDraws,
    dataset: Option<&AnalyticDataset>,
    level: f64,
) -> Result<Vec<CumulativeRow>> {
    let acc = DrawAccessor::new(draws)?;
    let has_covariates = !acc.zeta_cols.is_empty();
    let mut rows = Vec::new();
    for d in 1..=acc.max_duration() {
        let weights = match dataset {
            Some(ds) if has_covariates => ExposedCovariates::from_dataset(ds, d).ok(),
            _ => None,
        };
        let values = (0..draws.n_draws())
            .map(|r| {
                let beta = acc.beta(r);
                match &weights {
                    Some(w) => w.cumulative_rr(&beta, &acc.zeta(r)),
                    None => cumulative_rr_no_covariates(&beta, d),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let interval = posterior_mean_ci(&values, level)?;
        rows.push(CumulativeRow {
            d,
            method: if weights.is_some() {
                CumulativeMethod::CovariateWeighted
            } else {
                CumulativeMethod::Unweighted
            },
            direction: classify_direction(&interval),
            interval,
        });
    }
    Ok(rows)
}
