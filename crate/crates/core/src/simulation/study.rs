//! Replicated simulation studies comparing the EDVCM with its comparators.

use serde::{Deserialize, Serialize};

use crate::dataset::AnalyticDataset;
use crate::error::{EdvcmError, Result};
use crate::grid::{lag_cells, triangle_cells};
use crate::hmc::{run_hmc, SamplerConfig};
use crate::likelihood::ParameterSet;
use crate::priors::PriorSpec;
use crate::simulation::datagen::{remove_durations, simulate_dataset, EventCounts, LayoutSpec};
use crate::simulation::glm::fit_frequentist_glm;
use crate::simulation::metrics::{compute_metrics, CellMetrics};
use crate::simulation::surface::{generate_lag_surface, generate_true_surface, SurfaceSpec};
use crate::summaries::{posterior_mean_ci, Interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Edvcm,
    IndepNormal,
    FreqGlm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Edvcm => "edvcm",
            Method::IndepNormal => "indep-normal",
            Method::FreqGlm => "freq-glm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "edvcm" => Some(Method::Edvcm),
            "indep-normal" => Some(Method::IndepNormal),
            "freq-glm" => Some(Method::FreqGlm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub name: String,
    pub surface: SurfaceSpec,
    /// One scenario per noise level; overrides `surface.noise_fraction`.
    pub noise_fractions: Vec<f64>,
    pub layout: LayoutSpec,
    pub methods: Vec<Method>,
    pub n_sim: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub prior: PriorSpec,
    /// Durations whose strata are dropped before fitting.
    pub remove_durations: Vec<u32>,
    pub level: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            surface: SurfaceSpec::default(),
            noise_fractions: vec![0.25],
            layout: LayoutSpec::default(),
            methods: vec![Method::Edvcm, Method::IndepNormal, Method::FreqGlm],
            n_sim: 100,
            seed: 1,
            sampler: SamplerConfig::default(),
            prior: PriorSpec::simulation(),
            remove_durations: Vec::new(),
            level: 0.95,
        }
    }
}

impl Protocol {
    /// Named protocol presets.
    ///
    /// `full-main` is the full-size study (D = 14, two noise levels,
    /// 5000 replicates). The `desk-*` presets are reduced versions of the
    /// main, missing-duration and lagged-effect studies.
    pub fn preset(name: &str) -> Option<Self> {
        let desk_sampler = SamplerConfig {
            n_warmup: 500,
            n_samples: 500,
            ..SamplerConfig::default()
        };
        let desk_layout = |d: u32, lag: u32| LayoutSpec {
            max_duration: d,
            events: EventCounts::Constant { n: 30 },
            max_lag: lag,
            ..LayoutSpec::default()
        };
        let surface = |d: u32| SurfaceSpec {
            max_duration: d,
            ..SurfaceSpec::default()
        };
        let p = match name {
            "full-main" => Self {
                name: name.into(),
                surface: surface(14),
                noise_fractions: vec![0.25, 1.0],
                layout: LayoutSpec::default(),
                n_sim: 5000,
                ..Self::default()
            },
            "desk-main" => Self {
                name: name.into(),
                surface: surface(6),
                layout: desk_layout(6, 0),
                n_sim: 200,
                sampler: desk_sampler,
                ..Self::default()
            },
            "desk-missing" => Self {
                name: name.into(),
                surface: surface(5),
                layout: desk_layout(5, 0),
                methods: vec![Method::Edvcm],
                remove_durations: vec![3],
                n_sim: 100,
                sampler: desk_sampler,
                ..Self::default()
            },
            "desk-lag" => Self {
                name: name.into(),
                surface: surface(4),
                layout: desk_layout(4, 3),
                methods: vec![Method::Edvcm],
                n_sim: 100,
                sampler: desk_sampler,
                ..Self::default()
            },
            _ => return None,
        };
        Some(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.surface.validate()?;
        self.layout.validate()?;
        self.sampler.validate()?;
        self.prior.validate()?;
        if self.surface.max_duration != self.layout.max_duration {
            return Err(EdvcmError::Config(format!(
                "surface max_duration {} differs from layout max_duration {}",
                self.surface.max_duration, self.layout.max_duration
            )));
        }
        if self.n_sim == 0 || self.methods.is_empty() || self.noise_fractions.is_empty() {
            return Err(EdvcmError::Config("n_sim, methods and noise_fractions must be non-empty".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EdvcmError::Config("level must lie in (0, 1)".into()));
        }
        if let Some(f) = self.noise_fractions.iter().find(|f| !(**f >= 0.0)) {
            return Err(EdvcmError::Config(format!("noise fraction must be non-negative, got {f}")));
        }
        if let Some(&d) = self
            .remove_durations
            .iter()
            .find(|&&d| d == 0 || d > self.layout.max_duration)
        {
            return Err(EdvcmError::Duration(d));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sub-seed for `(master, scenario, replicate, stream)`.
pub fn derive_seed(master: u64, scenario: usize, replicate: usize, stream: u64) -> u64 {
    let mut s = mix_seed(master);
    for v in [scenario as u64, replicate as u64, stream] {
        s = mix_seed(s ^ v);
    }
    s
}

/// Posterior or sampling summaries of every coefficient, in cell order
/// (exposure triangle, then lag rectangle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimates {
    pub beta: Vec<Option<Interval>>,
    pub theta: Vec<Option<Interval>>,
    pub divergences: usize,
}

fn bayes_fit(dataset: &AnalyticDataset, prior: &PriorSpec, sampler: &SamplerConfig, level: f64) -> Result<CoefficientEstimates> {
    let draws = run_hmc(dataset, prior, sampler)?;
    let summarize = |name: String| -> Result<Option<Interval>> {
        let col = draws
            .column_by_name(&name)
            .ok_or_else(|| EdvcmError::Config(format!("missing parameter {name}")))?;
        posterior_mean_ci(&col, level).map(Some)
    };
    let beta = triangle_cells(dataset.max_duration)
        .into_iter()
        .map(|(d, t)| summarize(format!("beta[{d},{t}]")))
        .collect::<Result<_>>()?;
    let theta = lag_cells(dataset.max_duration, dataset.max_lag)
        .into_iter()
        .map(|(d, l)| summarize(format!("theta[{d},{l}]")))
        .collect::<Result<_>>()?;
    Ok(CoefficientEstimates {
        beta,
        theta,
        divergences: draws.divergences(),
    })
}

/// EDVCM fit: posterior means and percentile intervals.
pub fn fit_edvcm(dataset: &AnalyticDataset, prior: &PriorSpec, sampler: &SamplerConfig, level: f64) -> Result<CoefficientEstimates> {
    bayes_fit(dataset, prior, sampler, level)
}

/// Same likelihood and sampler with iid N(0, 1) coefficient priors.
pub fn fit_independent_normal(dataset: &AnalyticDataset, sampler: &SamplerConfig, level: f64) -> Result<CoefficientEstimates> {
    bayes_fit(dataset, &PriorSpec::independent_normal(), sampler, level)
}

/// Per-duration GLM fits; durations that cannot be fitted yield `None`.
pub fn fit_glm_all(dataset: &AnalyticDataset, level: f64) -> (CoefficientEstimates, usize) {
    let cells = triangle_cells(dataset.max_duration);
    let lcells = lag_cells(dataset.max_duration, dataset.max_lag);
    let mut beta = vec![None; cells.len()];
    let mut theta = vec![None; lcells.len()];
    let mut failures = 0;
    for d in 1..=dataset.max_duration {
        match fit_frequentist_glm(dataset, d, level) {
            Ok(fit) => {
                let iv = |j: usize| {
                    Some(Interval {
                        mean: fit.estimates[j],
                        lower: fit.lower[j],
                        upper: fit.upper[j],
                    })
                };
                for (i, &(cd, t)) in cells.iter().enumerate() {
                    if cd == d {
                        beta[i] = fit.index_of(&format!("beta[{d},{t}]")).and_then(iv);
                    }
                }
                for (i, &(cd, l)) in lcells.iter().enumerate() {
                    if cd == d {
                        theta[i] = fit.index_of(&format!("theta[{d},{l}]")).and_then(iv);
                    }
                }
            }
            Err(e) => {
                log::debug!("GLM for duration {d} not fitted: {e}");
                failures += 1;
            }
        }
    }
    (
        CoefficientEstimates {
            beta,
            theta,
            divergences: 0,
        },
        failures,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Beta,
    Theta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    pub d: u32,
    /// Exposure day `t` or lag day `l`.
    pub index: u32,
    pub truth: f64,
}

impl Cell {
    pub fn name(&self) -> String {
        match self.kind {
            CellKind::Beta => format!("beta[{},{}]", self.d, self.index),
            CellKind::Theta => format!("theta[{},{}]", self.d, self.index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    /// Aligned with the scenario's `cells`.
    pub metrics: Vec<CellMetrics>,
    /// Replicates where the fit failed entirely.
    pub failed_replicates: usize,
    /// GLM only: per-duration fits that failed (separation, no data).
    pub failed_duration_fits: usize,
    pub divergent_transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub noise_fraction: f64,
    pub cells: Vec<Cell>,
    pub methods: Vec<MethodReport>,
}

impl ScenarioReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub protocol: Protocol,
    pub scenarios: Vec<ScenarioReport>,
}

/// One line of the long-format report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub method: &'static str,
    pub parameter: String,
    pub d: u32,
    pub t: u32,
    pub metric: &'static str,
    pub value: f64,
}

impl StudyReport {
    pub fn long_rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for sc in &self.scenarios {
            for mr in &sc.methods {
                for (cell, m) in sc.cells.iter().zip(&mr.metrics) {
                    let bias_name = if m.bias_is_absolute { "abs_bias" } else { "percent_bias" };
                    for (metric, value) in [
                        ("truth", cell.truth),
                        ("mean_estimate", m.mean_estimate),
                        (bias_name, m.percent_bias),
                        ("rmse", m.rmse),
                        ("coverage", m.coverage),
                        ("mean_width", m.mean_width),
                        ("n", m.n as f64),
                    ] {
                        rows.push(ReportRow {
                            scenario: sc.scenario.clone(),
                            method: mr.method.as_str(),
                            parameter: cell.name(),
                            d: cell.d,
                            t: cell.index,
                            metric,
                            value,
                        });
                    }
                }
            }
        }
        rows
    }
}

struct Replicate {
    per_method: Vec<(Option<CoefficientEstimates>, usize)>,
}

fn run_replicate(
    protocol: &Protocol,
    scenario: usize,
    rep: usize,
    truth: &ParameterSet,
) -> Result<Replicate> {
    let data = simulate_dataset(&protocol.layout, truth, derive_seed(protocol.seed, scenario, rep, 0))?;
    let data = if protocol.remove_durations.is_empty() {
        data
    } else {
        remove_durations(&data, &protocol.remove_durations)?
    };
    let mut per_method = Vec::new();
    for (m, method) in protocol.methods.iter().enumerate() {
        let sampler = SamplerConfig {
            seed: derive_seed(protocol.seed, scenario, rep, 1 + m as u64),
            ..protocol.sampler.clone()
        };
        let result = match method {
            Method::Edvcm => fit_edvcm(&data, &protocol.prior, &sampler, protocol.level).map(|e| (e, 0)),
            Method::IndepNormal => fit_independent_normal(&data, &sampler, protocol.level).map(|e| (e, 0)),
            Method::FreqGlm => Ok(fit_glm_all(&data, protocol.level)),
        };
        per_method.push(match result {
            Ok((e, f)) => (Some(e), f),
            Err(e) => {
                log::warn!("replicate {rep} ({}) failed: {e}", method.as_str());
                (None, 0)
            }
        });
    }
    Ok(Replicate { per_method })
}

fn map_replicates<F>(n: usize, f: F) -> Vec<Result<Replicate>>
where
    F: Fn(usize) -> Result<Replicate> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Truth surfaces for a scenario with the given noise level.
pub fn scenario_truth(protocol: &Protocol, noise_fraction: f64) -> Result<ParameterSet> {
    let spec = SurfaceSpec {
        noise_fraction,
        ..protocol.surface.clone()
    };
    let (beta, _) = generate_true_surface(&spec)?;
    let theta = if protocol.layout.max_lag > 0 {
        let lag_spec = SurfaceSpec {
            seed: mix_seed(spec.seed ^ 0x4c41_47),
            ..spec
        };
        Some(generate_lag_surface(&lag_spec, protocol.layout.max_lag)?.0)
    } else {
        None
    };
    Ok(ParameterSet {
        beta,
        theta,
        zeta: Vec::new(),
    })
}

/// Run every scenario of the protocol. Replicates are independent jobs;
/// the report does not depend on the number of worker threads.
pub fn run_study(protocol: &Protocol) -> Result<StudyReport> {
    protocol.validate()?;
    let mut scenarios = Vec::new();
    for (s, &noise) in protocol.noise_fractions.iter().enumerate() {
        let truth = scenario_truth(protocol, noise)?;
        let mut cells: Vec<Cell> = triangle_cells(protocol.layout.max_duration)
            .into_iter()
            .zip(truth.beta.values())
            .map(|((d, t), &v)| Cell {
                kind: CellKind::Beta,
                d,
                index: t,
                truth: v,
            })
            .collect();
        if let Some(theta) = &truth.theta {
            cells.extend(
                lag_cells(theta.max_duration(), theta.max_lag())
                    .into_iter()
                    .zip(theta.values())
                    .map(|((d, l), &v)| Cell {
                        kind: CellKind::Theta,
                        d,
                        index: l,
                        truth: v,
                    }),
            );
        }
        let reps = map_replicates(protocol.n_sim, |r| {
            let out = run_replicate(protocol, s, r, &truth);
            log::info!("scenario {s} replicate {r} done");
            out
        });
        let reps: Vec<Replicate> = reps.into_iter().collect::<Result<_>>()?;
        let methods = protocol
            .methods
            .iter()
            .enumerate()
            .map(|(m, &method)| {
                let mut failed_replicates = 0;
                let mut failed_duration_fits = 0;
                let mut divergent_transitions = 0;
                let mut per_cell: Vec<Vec<Option<Interval>>> = vec![Vec::with_capacity(reps.len()); cells.len()];
                for rep in &reps {
                    let (est, f) = &rep.per_method[m];
                    failed_duration_fits += f;
                    match est {
                        Some(e) => {
                            divergent_transitions += e.divergences;
                            for (i, v) in e.beta.iter().chain(e.theta.iter()).enumerate() {
                                per_cell[i].push(*v);
                            }
                        }
                        None => {
                            failed_replicates += 1;
                            per_cell.iter_mut().for_each(|c| c.push(None));
                        }
                    }
                }
                MethodReport {
                    method,
                    metrics: per_cell
                        .iter()
                        .zip(&cells)
                        .map(|(e, c)| compute_metrics(e, c.truth))
                        .collect(),
                    failed_replicates,
                    failed_duration_fits,
                    divergent_transitions,
                }
            })
            .collect();
        scenarios.push(ScenarioReport {
            scenario: format!("noise={noise}"),
            noise_fraction: noise,
            cells,
            methods,
        });
    }
    Ok(StudyReport {
        protocol: protocol.clone(),
        scenarios,
    })
}
