//! Static-trajectory Hamiltonian Monte Carlo with a jittered step count,
//! dual-averaging step-size adaptation and a diagonal mass matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::AnalyticDataset;
use crate::diagnostics::{diagnose, ParameterDiagnostics};
use crate::error::{EdvcmError, Result};
use crate::posterior::Posterior;
use crate::priors::PriorSpec;

/// Energy error (nats) beyond which a transition counts as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Fraction of divergent post-warmup transitions that triggers a warning.
pub const DIVERGENCE_WARNING_FRACTION: f64 = 0.10;

// Dual-averaging constants.
const DA_GAMMA: f64 = 0.05;
const DA_T0: f64 = 10.0;
const DA_KAPPA: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_accept: f64,
    pub max_leapfrog_steps: usize,
    /// Upper integration time; the step count is uniform on
    /// `1..=ceil(trajectory_length / step_size)`, capped by `max_leapfrog_steps`.
    pub trajectory_length: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 1000,
            target_accept: 0.8,
            max_leapfrog_steps: 1024,
            trajectory_length: 3.0,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_samples == 0 || self.max_leapfrog_steps == 0 {
            return Err(EdvcmError::Config("chain, sample and leapfrog counts must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(EdvcmError::Config("target_accept must lie in (0, 1)".into()));
        }
        if !(self.trajectory_length > 0.0) {
            return Err(EdvcmError::Config("trajectory_length must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable log density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Log density at `q`; the gradient is written into `grad`.
    fn log_density(&self, q: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    /// Map a sampled point to reported quantities.
    fn constrain(&self, q: &[f64]) -> Result<Vec<f64>> {
        Ok(q.to_vec())
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    fn unconstrained_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }
}

impl LogDensity for Posterior {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn log_density(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.log_posterior_into(q, grad)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        Posterior::initial_point(self, rng)
    }

    fn constrain(&self, q: &[f64]) -> Result<Vec<f64>> {
        Posterior::constrain(self, q)
    }

    fn parameter_names(&self) -> Vec<String> {
        self.layout().constrained_names()
    }

    fn unconstrained_names(&self) -> Vec<String> {
        self.layout().unconstrained_names()
    }
}

/// Integrate Hamiltonian dynamics for `n_steps` leapfrog steps.
///
/// `grad` must hold the gradient of the log density at `position` on entry
/// and holds it at the final position on exit. Returns the final log density.
pub fn leapfrog<F>(
    position: &mut [f64],
    momentum: &mut [f64],
    grad: &mut [f64],
    step_size: f64,
    n_steps: usize,
    inv_metric: &[f64],
    mut log_density: F,
) -> Result<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    if !(step_size > 0.0) {
        return Err(EdvcmError::Config("step size must be positive".into()));
    }
    let mut logp = f64::NAN;
    for _ in 0..n_steps {
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * step_size * g;
        }
        for ((q, p), m) in position.iter_mut().zip(momentum.iter()).zip(inv_metric) {
            *q += step_size * m * p;
        }
        logp = log_density(position, grad)?;
        for (p, g) in momentum.iter_mut().zip(grad.iter()) {
            *p += 0.5 * step_size * g;
        }
        if !logp.is_finite() || momentum.iter().any(|p| !p.is_finite()) {
            return Err(EdvcmError::NonFinite("leapfrog trajectory".into()));
        }
    }
    Ok(logp)
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
}

/// Per-chain sampler state summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub mean_accept: f64,
    pub divergences: usize,
    pub leapfrog_steps: usize,
}

/// Post-warmup draws of all chains.
///
/// Rows are chain-major: draw `i` of chain `c` is row `c * n_samples + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub unconstrained_names: Vec<String>,
    pub n_chains: usize,
    pub n_samples: usize,
    pub constrained: Vec<f64>,
    pub unconstrained: Vec<f64>,
    pub chain_stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_samples
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let k = self.n_params();
        &self.constrained[r * k..(r + 1) * k]
    }

    /// All draws of one constrained parameter.
    pub fn column(&self, p: usize) -> Vec<f64> {
        let k = self.n_params();
        (0..self.n_draws()).map(|r| self.constrained[r * k + p]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|p| self.column(p))
    }

    pub fn chains_of(&self, p: usize) -> Vec<Vec<f64>> {
        let k = self.n_params();
        (0..self.n_chains)
            .map(|c| {
                (0..self.n_samples)
                    .map(|i| self.constrained[(c * self.n_samples + i) * k + p])
                    .collect()
            })
            .collect()
    }

    pub fn unconstrained_chains_of(&self, p: usize) -> Vec<Vec<f64>> {
        let k = self.unconstrained_names.len();
        (0..self.n_chains)
            .map(|c| {
                (0..self.n_samples)
                    .map(|i| self.unconstrained[(c * self.n_samples + i) * k + p])
                    .collect()
            })
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.chain_stats.iter().map(|c| c.divergences).sum()
    }

    pub fn divergence_fraction(&self) -> f64 {
        self.divergences() as f64 / self.n_draws() as f64
    }

    /// More than [`DIVERGENCE_WARNING_FRACTION`] of transitions diverged.
    pub fn divergence_warning(&self) -> bool {
        self.divergence_fraction() > DIVERGENCE_WARNING_FRACTION
    }

    pub fn diagnostics(&self) -> Result<Vec<ParameterDiagnostics>> {
        diagnostics(self)
    }
}

/// Split R-hat and bulk ESS for every constrained parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<ParameterDiagnostics>> {
    diagnose(&draws.names, draws.n_chains, |p| draws.chains_of(p))
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            m: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + DA_T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        self.log_eps = self.mu - self.m.sqrt() / DA_GAMMA * self.h_bar;
        let eta = self.m.powf(-DA_KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct Transition {
    accept_prob: f64,
    divergent: bool,
    steps: usize,
}

struct ChainState<'a, T: LogDensity> {
    target: &'a T,
    q: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    rng: ChaCha8Rng,
    scratch_q: Vec<f64>,
    scratch_p: Vec<f64>,
    scratch_g: Vec<f64>,
}

impl<'a, T: LogDensity> ChainState<'a, T> {
    fn transition(&mut self, eps: f64, n_max: usize, inv_metric: &[f64]) -> Transition {
        let n = self.q.len();
        for i in 0..n {
            let z: f64 = self.rng.sample(StandardNormal);
            self.scratch_p[i] = z / inv_metric[i].sqrt();
        }
        let h0 = -self.logp + kinetic(&self.scratch_p, inv_metric);
        let steps = self.rng.gen_range(1..=n_max);
        let u: f64 = self.rng.gen();
        self.scratch_q.copy_from_slice(&self.q);
        self.scratch_g.copy_from_slice(&self.grad);
        let target = self.target;
        let result = leapfrog(
            &mut self.scratch_q,
            &mut self.scratch_p,
            &mut self.scratch_g,
            eps,
            steps,
            inv_metric,
            |q, g| target.log_density(q, g),
        );
        let (accept_prob, divergent) = match result {
            Ok(logp1) => {
                let h1 = -logp1 + kinetic(&self.scratch_p, inv_metric);
                let dh = h1 - h0;
                if !dh.is_finite() || dh > DIVERGENCE_THRESHOLD {
                    (0.0, true)
                } else {
                    let a = (-dh).exp().min(1.0);
                    if u < a {
                        std::mem::swap(&mut self.q, &mut self.scratch_q);
                        std::mem::swap(&mut self.grad, &mut self.scratch_g);
                        self.logp = logp1;
                    }
                    (a, false)
                }
            }
            Err(_) => (0.0, true),
        };
        Transition {
            accept_prob,
            divergent,
            steps,
        }
    }

    /// Double or halve `eps` until the one-step acceptance crosses 0.5.
    fn initial_step_size(&mut self, inv_metric: &[f64]) -> f64 {
        let mut eps: f64 = 0.1;
        let accept = |s: &mut Self, eps: f64| -> f64 {
            let n = s.q.len();
            for i in 0..n {
                let z: f64 = s.rng.sample(StandardNormal);
                s.scratch_p[i] = z / inv_metric[i].sqrt();
            }
            let h0 = -s.logp + kinetic(&s.scratch_p, inv_metric);
            s.scratch_q.copy_from_slice(&s.q);
            s.scratch_g.copy_from_slice(&s.grad);
            let target = s.target;
            match leapfrog(&mut s.scratch_q, &mut s.scratch_p, &mut s.scratch_g, eps, 1, inv_metric, |q, g| {
                target.log_density(q, g)
            }) {
                Ok(l) => {
                    let dh = -l + kinetic(&s.scratch_p, inv_metric) - h0;
                    if dh.is_finite() {
                        (-dh).exp().min(1.0)
                    } else {
                        0.0
                    }
                }
                Err(_) => 0.0,
            }
        };
        let a0 = accept(self, eps);
        let up = a0 > 0.5;
        for _ in 0..50 {
            let next = if up { eps * 2.0 } else { eps * 0.5 };
            let a = accept(self, next);
            if (up && a < 0.5) || (!up && a > 0.5) {
                return if up { eps } else { next };
            }
            eps = next;
        }
        eps
    }
}

fn n_max(config: &SamplerConfig, eps: f64) -> usize {
    ((config.trajectory_length / eps).ceil() as usize).clamp(1, config.max_leapfrog_steps)
}

/// Metric estimation windows `[start, end)` within `n_warmup` iterations.
///
/// After an initial step-size-only phase, provisional windows of doubling
/// length cover the first half of warmup; the final metric comes from the
/// window `[w/2, 0.85 w)`, leaving the last 15% for step-size adaptation.
pub fn metric_windows(n_warmup: usize) -> Vec<(usize, usize)> {
    if n_warmup < 40 {
        return Vec::new();
    }
    let half = n_warmup / 2;
    let mut windows = Vec::new();
    let mut start = (n_warmup * 15 / 100).min(75);
    let mut size = 25;
    while start + size <= half {
        let end = if half - (start + size) < 2 * size { half } else { start + size };
        windows.push((start, end));
        start = end;
        size *= 2;
    }
    windows.push((half, n_warmup * 85 / 100));
    windows
}

/// Run one chain; `chain` selects an independent RNG stream.
pub fn sample_chain<T: LogDensity>(target: &T, config: &SamplerConfig, chain: usize) -> Result<(Vec<f64>, Vec<f64>, ChainStats)> {
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64 + 1);

    let mut grad = vec![0.0; dim];
    let mut init = None;
    for _ in 0..20 {
        let q = target.initial_point(&mut rng);
        if let Ok(lp) = target.log_density(&q, &mut grad) {
            if lp.is_finite() {
                init = Some((q, lp));
                break;
            }
        }
    }
    let (q, logp) = init.ok_or_else(|| EdvcmError::NonFinite("no finite initial log posterior".into()))?;

    let mut state = ChainState {
        target,
        q,
        grad,
        logp,
        rng,
        scratch_q: vec![0.0; dim],
        scratch_p: vec![0.0; dim],
        scratch_g: vec![0.0; dim],
    };

    let mut inv_metric = vec![1.0; dim];
    let mut eps = state.initial_step_size(&inv_metric);
    let mut da = DualAveraging::new(eps, config.target_accept);

    let w = config.n_warmup;
    let windows = metric_windows(w);
    let mut window = 0;
    let mut welford = Welford::new(dim);

    for it in 0..w {
        let tr = state.transition(eps, n_max(config, eps), &inv_metric);
        eps = da.update(tr.accept_prob);
        if let Some(&(start, end)) = windows.get(window) {
            if it >= start {
                welford.push(&state.q);
            }
            if it + 1 == end {
                inv_metric = welford.regularized_variance();
                welford = Welford::new(dim);
                window += 1;
                eps = state.initial_step_size(&inv_metric);
                da = DualAveraging::new(eps, config.target_accept);
            }
        }
    }
    if w > 0 {
        eps = da.final_step();
    }

    let n_max = n_max(config, eps);
    let mut unconstrained = Vec::with_capacity(config.n_samples * dim);
    let mut constrained = Vec::new();
    let mut accept_sum = 0.0;
    let mut divergences = 0;
    let mut steps = 0;
    for _ in 0..config.n_samples {
        let tr = state.transition(eps, n_max, &inv_metric);
        accept_sum += tr.accept_prob;
        divergences += usize::from(tr.divergent);
        steps += tr.steps;
        unconstrained.extend_from_slice(&state.q);
        constrained.extend(target.constrain(&state.q)?);
    }
    Ok((
        unconstrained,
        constrained,
        ChainStats {
            step_size: eps,
            inv_metric,
            mean_accept: accept_sum / config.n_samples as f64,
            divergences,
            leapfrog_steps: steps,
        },
    ))
}

/// Run all chains (in parallel when the `parallel` feature is on) and stack
/// their draws. Results do not depend on the number of worker threads.
pub fn sample<T: LogDensity>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        (0..config.n_chains)
            .into_par_iter()
            .map(|c| sample_chain(target, config, c))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = (0..config.n_chains).map(|c| sample_chain(target, config, c)).collect();

    let mut draws = PosteriorDraws {
        names: target.parameter_names(),
        unconstrained_names: target.unconstrained_names(),
        n_chains: config.n_chains,
        n_samples: config.n_samples,
        constrained: Vec::new(),
        unconstrained: Vec::new(),
        chain_stats: Vec::new(),
    };
    for r in results {
        let (u, c, s) = r?;
        draws.unconstrained.extend(u);
        draws.constrained.extend(c);
        draws.chain_stats.push(s);
    }
    if draws.divergence_warning() {
        log::warn!(
            "{} of {} post-warmup transitions diverged",
            draws.divergences(),
            draws.n_draws()
        );
    }
    Ok(draws)
}

/// Sample the posterior of `dataset` under `prior`.
pub fn run_hmc(dataset: &AnalyticDataset, prior: &PriorSpec, config: &SamplerConfig) -> Result<PosteriorDraws> {
    let post = Posterior::new(dataset, prior)?;
    sample(&post, config)
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    /// Sample variance shrunk toward 1e-3.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n;
        if n < 3.0 {
            return vec![1.0; self.mean.len()];
        }
        self.m2
            .iter()
            .map(|s| (n / (n + 5.0)) * (s / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0)))
            .collect()
    }
}
