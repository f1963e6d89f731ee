//! Rank-normalized split R-hat and bulk effective sample size.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{EdvcmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    /// `None` when fewer than two chains are available.
    pub rhat: Option<f64>,
    pub ess_bulk: f64,
}

/// Split each chain into halves (dropping the middle draw of odd lengths).
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

/// Replace draws by normal scores of their pooled fractional ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &all[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Classic potential scale reduction on already-split chains.
fn rhat_split(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    if w == 0.0 {
        return if b == 0.0 { f64::NAN } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

/// Multi-chain ESS with Geyer's initial monotone sequence.
fn ess_split(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| {
                (0..n - lag).map(|i| (c[i] - mu) * (c[i + lag] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let w = acov0 * n as f64 / (n as f64 - 1.0);
    let b_over_n = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |a: f64| 1.0 - (w - a) / var_plus;

    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let r0 = if t == 0 { 1.0 } else { rho(acov(t)) };
        let r1 = rho(acov(t + 1));
        let mut pair = r0 + r1;
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        prev_pair = pair;
        sum_pairs += pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10());
    total / tau
}

/// Split-R-hat (max of bulk and folded rank-normalized) for one parameter.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(EdvcmError::Config("R-hat requires at least two chains".into()));
    }
    let sp = split(chains);
    if sp[0].len() < 2 {
        return Err(EdvcmError::Empty("too few draws per chain"));
    }
    let bulk = rhat_split(&rank_normalize(&sp));
    let mut pooled: Vec<f64> = sp.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let med = pooled[pooled.len() / 2];
    let folded: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = rhat_split(&rank_normalize(&folded));
    Ok(match (bulk.is_nan(), tail.is_nan()) {
        (true, true) => f64::NAN,
        (true, false) => tail,
        (false, true) => bulk,
        (false, false) => bulk.max(tail),
    })
}

/// Bulk ESS on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.is_empty() || chains[0].is_empty() {
        return Err(EdvcmError::Empty("no draws"));
    }
    Ok(ess_split(&rank_normalize(&split(chains))))
}

/// Diagnostics for every parameter; `chains_of(p)` returns the per-chain draws.
pub fn diagnose<F>(names: &[String], n_chains: usize, chains_of: F) -> Result<Vec<ParameterDiagnostics>>
where
    F: Fn(usize) -> Vec<Vec<f64>>,
{
    names
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let chains = chains_of(p);
            Ok(ParameterDiagnostics {
                name: name.clone(),
                rhat: if n_chains >= 2 { Some(split_rhat(&chains)?) } else { None },
                ess_bulk: ess_bulk(&chains)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(seed: u64, m: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn iid_chains_rhat_near_one() {
        let r = split_rhat(&iid(1, 4, 1000)).unwrap();
        assert!((0.99..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn separated_chains_rhat_large() {
        let chains = vec![vec![0.0; 100], vec![1.0; 100]];
        assert!(split_rhat(&chains).unwrap() > 2.0);
        let mut c = iid(2, 2, 500);
        c[1].iter_mut().for_each(|x| *x += 5.0);
        // rank normalization bounds R-hat for fully separated draws
        assert!(split_rhat(&c).unwrap() > 1.5);
    }

    #[test]
    fn iid_ess_near_n() {
        let chains = iid(3, 4, 1000);
        let ess = ess_bulk(&chains).unwrap();
        assert!((ess - 4000.0).abs() < 0.2 * 4000.0, "{ess}");
    }

    #[test]
    fn autocorrelated_ess_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rho: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        x = rho * x + (1.0 - rho * rho).sqrt() * e;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = ess_bulk(&chains).unwrap();
        // AR(1) theory: n (1 - rho) / (1 + rho) ~ 421
        assert!(ess > 250.0 && ess < 700.0, "{ess}");
    }

    #[test]
    fn single_chain() {
        assert!(split_rhat(&iid(5, 1, 200)).is_err());
        assert!(ess_bulk(&iid(5, 1, 200)).unwrap() > 100.0);
        let d = diagnose(&["x".to_string()], 1, |_| iid(5, 1, 200)).unwrap();
        assert_eq!(d[0].rhat, None);
    }
}
