#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use edvcm_core::dataset::{validate_dataset, AnalyticDataset, RawUnit};
use edvcm_core::posterior::Posterior;

/// Random strata: every duration 1..=max_duration appears, two control years each.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    max_duration: u32,
    n_strata: usize,
    n_cov: usize,
    max_lag: u32,
    rate: f64,
) -> AnalyticDataset {
    assert!(n_strata >= max_duration as usize);
    let mut raw = Vec::new();
    for s in 0..n_strata {
        let d = if s < max_duration as usize { s as u32 + 1 } else { rng.gen_range(1..=max_duration) };
        let sid = format!("s{s}");
        for block in 0..3u8 {
            let exposed = block == 0;
            let days = (1..=d).map(|t| (Some(t), None)).chain((1..=max_lag).map(|l| (None, Some(l))));
            for (t, l) in days {
                let pt = rng.gen_range(0.5..2.0);
                let mean: f64 = rate * pt;
                raw.push(RawUnit {
                    unit_id: format!("{sid}-{block}-{}-{}", t.unwrap_or(0), l.unwrap_or(0)),
                    stratum_id: sid.clone(),
                    duration: d,
                    day: t,
                    lag: l,
                    exposed: u8::from(exposed && t.is_some()),
                    lag_indicator: u8::from(exposed && l.is_some()),
                    count: Poisson::new(mean).unwrap().sample(rng) as u64,
                    person_time: pt,
                    covariates: (0..n_cov).map(|_| StandardNormal.sample(rng)).collect(),
                });
            }
        }
    }
    validate_dataset(raw).unwrap()
}

/// Central differences of the log posterior.
pub fn finite_difference(post: &Posterior, q: &[f64], h: f64) -> Vec<f64> {
    (0..q.len())
        .map(|i| {
            let mut up = q.to_vec();
            let mut dn = q.to_vec();
            up[i] += h;
            dn[i] -= h;
            (post.log_posterior(&up).unwrap().0 - post.log_posterior(&dn).unwrap().0) / (2.0 * h)
        })
        .collect()
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// MLE of the exposure coefficients from an unconditional Poisson model
/// with one free intercept per stratum (no lags, no covariates).
///
/// Returns the triangle of coefficients, row-major by duration.
pub fn unconditional_poisson_mle(ds: &AnalyticDataset) -> Vec<f64> {
    let dmax = ds.max_duration;
    let nb = (dmax * (dmax + 1) / 2) as usize;
    let cell = |d: u32, t: u32| ((d - 1) * d / 2 + t - 1) as usize;
    let strata: Vec<_> = ds.strata.iter().filter(|s| s.total > 0).collect();
    let p = nb + strata.len();
    let mut x = vec![0.0; p];
    for (j, s) in strata.iter().enumerate() {
        let pt: f64 = s.units.iter().map(|u| u.person_time).sum();
        x[nb + j] = (s.total as f64 / pt).ln();
    }
    for _ in 0..200 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for (j, s) in strata.iter().enumerate() {
            for u in &s.units {
                let b = (u.role == edvcm_core::dataset::Role::Exposure).then(|| cell(u.duration, u.day().unwrap()));
                let eta = x[nb + j] + b.map_or(0.0, |k| x[k]) + u.person_time.ln();
                let mu = eta.exp();
                let r = u.count as f64 - mu;
                g[nb + j] += r;
                h[nb + j][nb + j] += mu;
                if let Some(k) = b {
                    g[k] += r;
                    h[k][k] += mu;
                    h[k][nb + j] += mu;
                    h[nb + j][k] += mu;
                }
            }
        }
        let step = solve(h, g.clone());
        for (xi, si) in x.iter_mut().zip(&step) {
            *xi += si;
        }
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-11 {
            break;
        }
    }
    x.truncate(nb);
    x
}

/// Posterior mean and SD of a scalar by trapezoidal quadrature of `exp(log_density)`.
pub fn quadrature_moments(log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let lp: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - m).exp() * if i == 0 || i == n { 0.5 } else { 1.0 })
        .collect();
    let z: f64 = w.iter().sum();
    let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
    let var = xs.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
    (mean, var.sqrt())
}

/// Single-coefficient dataset: `n` strata of duration 1, one exposed and two control days.
pub fn conjugate_toy<R: Rng>(rng: &mut R, n: usize, true_beta: f64) -> AnalyticDataset {
    let mut raw = Vec::new();
    for s in 0..n {
        for (k, a) in [1u8, 0, 0].into_iter().enumerate() {
            let mean = 3.0 * (true_beta * f64::from(a)).exp();
            raw.push(RawUnit {
                unit_id: format!("s{s}u{k}"),
                stratum_id: format!("s{s}"),
                duration: 1,
                day: Some(1),
                lag: None,
                exposed: a,
                lag_indicator: 0,
                count: Poisson::new(mean).unwrap().sample(rng) as u64,
                person_time: 1.0,
                covariates: vec![],
            });
        }
    }
    validate_dataset(raw).unwrap()
}

/// Log posterior of the toy's single coefficient under a `N(0, sd²)` prior,
/// written directly from the multinomial form.
pub fn conjugate_toy_log_posterior(ds: &AnalyticDataset, beta: f64, prior_sd: f64) -> f64 {
    let mut lp = -0.5 * (beta / prior_sd).powi(2);
    for s in &ds.strata {
        let w: Vec<f64> = s
            .units
            .iter()
            .map(|u| u.person_time * (beta * f64::from(u8::from(u.role == edvcm_core::dataset::Role::Exposure))).exp())
            .collect();
        let tot: f64 = w.iter().sum();
        for (u, wi) in s.units.iter().zip(&w) {
            lp += u.count as f64 * (wi / tot).ln();
        }
    }
    lp
}
