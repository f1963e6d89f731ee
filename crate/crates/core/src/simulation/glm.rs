//! Frequentist conditional Poisson regression fitted separately per duration.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{AnalyticDataset, Role, Stratum};
use crate::error::{EdvcmError, Result};
use crate::linalg::{spd_inverse, Matrix};

pub const MAX_ITERATIONS: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Estimates beyond this magnitude are treated as diverging to infinity.
pub const DIVERGENCE_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub duration: u32,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl GlmFit {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct Row {
    x: Vec<f64>,
    offset: f64,
    count: f64,
}

struct Design {
    strata: Vec<(Vec<Row>, f64)>,
    dim: usize,
}

impl Design {
    fn eval(&self, b: &[f64], with_info: bool) -> (f64, Vec<f64>, Matrix) {
        let p = self.dim;
        let mut ll = 0.0;
        let mut g = vec![0.0; p];
        let mut h = Matrix::zeros(p, p);
        let mut eta = Vec::new();
        let mut xbar = vec![0.0; p];
        for (rows, w) in &self.strata {
            eta.clear();
            eta.extend(rows.iter().map(|r| r.offset + r.x.iter().zip(b).map(|(x, b)| x * b).sum::<f64>()));
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = eta.iter().map(|e| (e - max).exp()).sum();
            let lse = max + z.ln();
            xbar.iter_mut().for_each(|v| *v = 0.0);
            for (r, e) in rows.iter().zip(&eta) {
                let pi = (e - lse).exp();
                ll += r.count * (e - lse);
                for j in 0..p {
                    g[j] += (r.count - w * pi) * r.x[j];
                    xbar[j] += pi * r.x[j];
                }
                if with_info {
                    for j in 0..p {
                        if r.x[j] == 0.0 {
                            continue;
                        }
                        for k in 0..p {
                            h[(j, k)] += w * pi * r.x[j] * r.x[k];
                        }
                    }
                }
            }
            if with_info {
                for j in 0..p {
                    for k in 0..p {
                        h[(j, k)] -= w * xbar[j] * xbar[k];
                    }
                }
            }
        }
        (ll, g, h)
    }
}

fn unit_design(
    role: Role,
    day: Option<u32>,
    lag: Option<u32>,
    covariates: &[f64],
    d: u32,
    max_lag: u32,
) -> Vec<f64> {
    let mut x = vec![0.0; d as usize + max_lag as usize + covariates.len()];
    match (role, day, lag) {
        (Role::Exposure, Some(t), _) => x[t as usize - 1] = 1.0,
        (Role::Lag, _, Some(l)) => x[d as usize + l as usize - 1] = 1.0,
        _ => {}
    }
    x[(d + max_lag) as usize..].copy_from_slice(covariates);
    x
}

/// Conditional MLE of `β_{d,1..d}` (plus `θ_{d,·}` and `ζ` when present)
/// from the strata of duration `d`, with Wald intervals at `level`.
pub fn fit_frequentist_glm(dataset: &AnalyticDataset, d: u32, level: f64) -> Result<GlmFit> {
    let strata: Vec<&Stratum> = dataset.strata.iter().filter(|s| s.duration == d).collect();
    if strata.is_empty() {
        return Err(EdvcmError::NotIdentifiable(format!("no strata of duration {d}")));
    }
    let max_lag = strata
        .iter()
        .flat_map(|s| s.units.iter())
        .filter_map(|u| u.lag())
        .max()
        .unwrap_or(0);
    let k = dataset.covariate_dim;
    let mut names: Vec<String> = (1..=d).map(|t| format!("beta[{d},{t}]")).collect();
    names.extend((1..=max_lag).map(|l| format!("theta[{d},{l}]")));
    names.extend((1..=k).map(|j| format!("zeta[{j}]")));
    let p = names.len();

    let n_ind = (d + max_lag) as usize;
    let mut events = vec![0.0; n_ind];
    let mut present = vec![false; n_ind];
    let mut total = 0.0;
    let mut design = Design {
        strata: Vec::new(),
        dim: p,
    };
    for s in &strata {
        let rows: Vec<Row> = s
            .units
            .iter()
            .map(|u| Row {
                x: unit_design(u.role, u.day(), u.lag(), &u.covariates, d, max_lag),
                offset: u.person_time.ln(),
                count: u.count as f64,
            })
            .collect();
        for r in &rows {
            for j in 0..n_ind {
                if r.x[j] != 0.0 {
                    present[j] = true;
                    events[j] += r.count;
                }
            }
        }
        if s.total > 0 {
            total += s.total as f64;
            design.strata.push((rows, s.total as f64));
        }
    }
    if total == 0.0 {
        return Err(EdvcmError::NotIdentifiable(format!("duration {d} has no events")));
    }
    for j in 0..n_ind {
        if !present[j] {
            return Err(EdvcmError::NotIdentifiable(format!("{} has no units", names[j])));
        }
        if events[j] == 0.0 {
            return Err(EdvcmError::NotIdentifiable(format!(
                "separation: {} has no events on its exposed cells (estimate diverges to -inf)",
                names[j]
            )));
        }
        if events[j] == total {
            return Err(EdvcmError::NotIdentifiable(format!(
                "separation: all events fall on the exposed cells of {} (estimate diverges to +inf)",
                names[j]
            )));
        }
    }

    let mut b = vec![0.0; p];
    let (mut ll, mut g, mut h) = design.eval(&b, true);
    let mut iterations = 0;
    while g.iter().fold(0.0f64, |m, v| m.max(v.abs())) >= GRADIENT_TOLERANCE {
        if iterations == MAX_ITERATIONS {
            return Err(EdvcmError::NotIdentifiable(format!(
                "Newton-Raphson did not converge for duration {d} in {MAX_ITERATIONS} iterations"
            )));
        }
        iterations += 1;
        let inv = spd_inverse(&h).map_err(|_| EdvcmError::Singular)?;
        let step = inv.matvec(&g);
        let mut scale = 1.0;
        loop {
            let cand: Vec<f64> = b.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let (ll_c, _, _) = design.eval(&cand, false);
            if ll_c >= ll - 1e-12 * ll.abs().max(1.0) || scale < 1e-10 {
                b = cand;
                break;
            }
            scale *= 0.5;
        }
        (ll, g, h) = design.eval(&b, true);
        if b.iter().any(|v| v.abs() > DIVERGENCE_BOUND || !v.is_finite()) {
            return Err(EdvcmError::NotIdentifiable(format!(
                "estimates for duration {d} diverge (quasi-separation)"
            )));
        }
    }
    let cov = spd_inverse(&h).map_err(|_| EdvcmError::Singular)?;
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    Ok(GlmFit {
        duration: d,
        lower: b.iter().zip(&std_errors).map(|(b, s)| b - z * s).collect(),
        upper: b.iter().zip(&std_errors).map(|(b, s)| b + z * s).collect(),
        names,
        estimates: b,
        std_errors,
        iterations,
        log_likelihood: ll,
    })
}
