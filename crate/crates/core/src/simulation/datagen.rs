//! Synthetic stratum layouts and multinomial outcome generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataset::{AnalyticDataset, DayIndex, ExposureUnit, Role, Stratum};
use crate::error::{EdvcmError, Result};
use crate::likelihood::{stratum_log_probabilities, ParameterSet};

/// Number of events (strata) per duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventCounts {
    Constant { n: u32 },
    /// `max(min, round(first · ratio^(d-1)))` events of duration `d`.
    Geometric { first: u32, ratio: f64, min: u32 },
    Explicit { counts: Vec<u32> },
}

impl EventCounts {
    pub fn count(&self, d: u32) -> u32 {
        match self {
            EventCounts::Constant { n } => *n,
            EventCounts::Geometric { first, ratio, min } => {
                let v = (*first as f64 * ratio.powi(d as i32 - 1)).round() as u32;
                v.max(*min)
            }
            EventCounts::Explicit { counts } => counts.get(d as usize - 1).copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub max_duration: u32,
    pub events: EventCounts,
    pub controls_per_event: u32,
    /// Person-time of every unit.
    pub person_time: f64,
    /// Baseline event rate per unit person-time.
    pub baseline_rate: f64,
    pub max_lag: u32,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            max_duration: 14,
            events: EventCounts::Geometric {
                first: 40,
                ratio: 0.85,
                min: 5,
            },
            controls_per_event: 2,
            person_time: 1000.0,
            baseline_rate: 0.01,
            max_lag: 0,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_duration == 0 {
            return Err(EdvcmError::Duration(0));
        }
        if self.controls_per_event == 0 {
            return Err(EdvcmError::Config("controls_per_event must be positive".into()));
        }
        if !(self.person_time > 0.0 && self.person_time.is_finite()) {
            return Err(EdvcmError::Config("person_time must be positive".into()));
        }
        if !(self.baseline_rate >= 0.0 && self.baseline_rate.is_finite()) {
            return Err(EdvcmError::Config("baseline_rate must be non-negative".into()));
        }
        match &self.events {
            EventCounts::Geometric { ratio, .. } if !(*ratio > 0.0) => {
                Err(EdvcmError::Config("geometric ratio must be positive".into()))
            }
            EventCounts::Explicit { counts } if counts.len() != self.max_duration as usize => {
                Err(EdvcmError::Dimension {
                    context: "explicit event counts",
                    expected: self.max_duration as usize,
                    got: counts.len(),
                })
            }
            _ => Ok(()),
        }
    }

    /// Zero-count dataset with the layout's strata and units.
    pub fn skeleton(&self) -> Result<AnalyticDataset> {
        self.validate()?;
        let mut strata = Vec::new();
        for d in 1..=self.max_duration {
            for e in 0..self.events.count(d) {
                let sid = format!("d{d}e{e}");
                let mut units = Vec::new();
                for c in 0..=self.controls_per_event {
                    let (exp_role, lag_role, tag) = if c == 0 {
                        (Role::Exposure, Role::Lag, "x".to_string())
                    } else {
                        (Role::ControlExposure, Role::ControlLag, format!("c{c}"))
                    };
                    for t in 1..=d {
                        units.push(self.unit(&sid, format!("{sid}{tag}t{t}"), d, exp_role, DayIndex::Exposure(t)));
                    }
                    for l in 1..=self.max_lag {
                        units.push(self.unit(&sid, format!("{sid}{tag}l{l}"), d, lag_role, DayIndex::Lag(l)));
                    }
                }
                strata.push(Stratum {
                    stratum_id: sid,
                    duration: d,
                    units,
                    total: 0,
                });
            }
        }
        if strata.is_empty() {
            return Err(EdvcmError::Empty("layout strata"));
        }
        Ok(AnalyticDataset {
            strata,
            max_duration: self.max_duration,
            max_lag: self.max_lag,
            covariate_dim: 0,
        })
    }

    fn unit(&self, sid: &str, unit_id: String, d: u32, role: Role, index: DayIndex) -> ExposureUnit {
        ExposureUnit {
            unit_id,
            stratum_id: sid.to_string(),
            duration: d,
            role,
            index,
            count: 0,
            person_time: self.person_time,
            covariates: Vec::new(),
        }
    }
}

/// Draw `Multinomial(n, p)` by sequential conditional binomials.
pub fn multinomial<R: rand::Rng>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() || mass <= 0.0 {
            out[i] = remaining;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let k = Binomial::new(remaining, q).expect("probability clamped to [0, 1]").sample(rng);
        out[i] = k;
        remaining -= k;
        mass -= p;
    }
    out
}

/// Fill a skeleton with outcomes: `W_s ~ Poisson(rate · ΣP)` per stratum,
/// then counts `~ Multinomial(W_s, π_s(truth))`.
pub fn fill_counts(skeleton: &AnalyticDataset, truth: &ParameterSet, baseline_rate: f64, seed: u64) -> Result<AnalyticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = skeleton.clone();
    for stratum in &mut out.strata {
        let exposure: f64 = stratum.units.iter().map(|u| u.person_time).sum();
        let mean = baseline_rate * exposure;
        let w = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| EdvcmError::Config(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng) as u64
        } else {
            0
        };
        let probs: Vec<f64> = stratum_log_probabilities(stratum, truth)?
            .into_iter()
            .map(f64::exp)
            .collect();
        let counts = multinomial(&mut rng, w, &probs);
        for (u, c) in stratum.units.iter_mut().zip(counts) {
            u.count = c;
        }
        stratum.total = w;
    }
    Ok(out)
}

pub fn simulate_dataset(layout: &LayoutSpec, truth: &ParameterSet, seed: u64) -> Result<AnalyticDataset> {
    if truth.beta.max_duration() != layout.max_duration {
        return Err(EdvcmError::Dimension {
            context: "truth beta grid",
            expected: layout.max_duration as usize,
            got: truth.beta.max_duration() as usize,
        });
    }
    let truth_lag = truth.theta.as_ref().map_or(0, |t| t.max_lag());
    if truth_lag != layout.max_lag {
        return Err(EdvcmError::Dimension {
            context: "truth theta lag horizon",
            expected: layout.max_lag as usize,
            got: truth_lag as usize,
        });
    }
    fill_counts(&layout.skeleton()?, truth, layout.baseline_rate, seed)
}

/// Drop all strata whose duration is in `durations`; the grid is unchanged.
pub fn remove_durations(dataset: &AnalyticDataset, durations: &[u32]) -> Result<AnalyticDataset> {
    if let Some(&d) = durations.iter().find(|&&d| d == 0 || d > dataset.max_duration) {
        return Err(EdvcmError::Duration(d));
    }
    let mut out = dataset.clone();
    out.strata.retain(|s| !durations.contains(&s.duration));
    if out.strata.is_empty() {
        return Err(EdvcmError::Empty("strata after duration removal"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_dataset;

    fn layout(d: u32, n: u32, controls: u32) -> LayoutSpec {
        LayoutSpec {
            max_duration: d,
            events: EventCounts::Constant { n },
            controls_per_event: controls,
            ..Default::default()
        }
    }

    #[test]
    fn skeleton_shape() {
        let l = LayoutSpec {
            max_lag: 2,
            ..layout(3, 4, 2)
        };
        let ds = l.skeleton().unwrap();
        assert_eq!(ds.strata.len(), 12);
        for s in &ds.strata {
            assert_eq!(s.units.len(), 3 * (s.duration as usize + 2));
        }
        // round-trips through validation
        let v = validate_dataset(ds.to_raw_units()).unwrap();
        assert_eq!(v.strata.len(), 12);
        assert_eq!(v.max_lag, 2);
    }

    #[test]
    fn geometric_counts() {
        let e = EventCounts::Geometric {
            first: 40,
            ratio: 0.5,
            min: 3,
        };
        assert_eq!((e.count(1), e.count(2), e.count(3), e.count(6)), (40, 20, 10, 3));
    }

    #[test]
    fn null_truth_gives_equal_shares() {
        // 1 exposed day + 2 controls, truth 0: each unit gets 1/3 of the events
        let l = LayoutSpec {
            baseline_rate: 0.005,
            ..layout(1, 10_000, 2)
        };
        let truth = ParameterSet::zeros(1, 0, 0);
        let ds = simulate_dataset(&l, &truth, 5).unwrap();
        let total: u64 = ds.strata.iter().map(|s| s.total).sum();
        let exposed: u64 = ds
            .units()
            .filter(|u| u.role == Role::Exposure)
            .map(|u| u.count)
            .sum();
        let share = exposed as f64 / total as f64;
        let se = (1.0 / 3.0 * 2.0 / 3.0 / total as f64).sqrt();
        assert!((share - 1.0 / 3.0).abs() < 3.0 * se, "{share} vs 1/3 (se {se})");
    }

    #[test]
    fn doubled_rate_gives_two_thirds() {
        let l = layout(1, 5_000, 1);
        let mut truth = ParameterSet::zeros(1, 0, 0);
        truth.beta.set(1, 1, 2f64.ln()).unwrap();
        let ds = simulate_dataset(&l, &truth, 9).unwrap();
        let total: u64 = ds.strata.iter().map(|s| s.total).sum();
        let exposed: u64 = ds.units().filter(|u| u.role == Role::Exposure).map(|u| u.count).sum();
        let share = exposed as f64 / total as f64;
        let se = (2.0 / 9.0 / total as f64).sqrt();
        assert!((share - 2.0 / 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let l = LayoutSpec {
            baseline_rate: 0.0,
            ..layout(3, 5, 2)
        };
        let ds = simulate_dataset(&l, &ParameterSet::zeros(3, 0, 0), 1).unwrap();
        assert!(ds.units().all(|u| u.count == 0));
        assert_eq!(ds.zero_total_strata().len(), ds.strata.len());
    }

    #[test]
    fn deterministic_given_seed() {
        let l = layout(4, 6, 2);
        let t = ParameterSet::zeros(4, 0, 0);
        assert_eq!(simulate_dataset(&l, &t, 3).unwrap(), simulate_dataset(&l, &t, 3).unwrap());
        assert_ne!(simulate_dataset(&l, &t, 3).unwrap(), simulate_dataset(&l, &t, 4).unwrap());
    }

    #[test]
    fn multinomial_conserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [0, 1, 17, 1000] {
            let c = multinomial(&mut rng, n, &[0.2, 0.5, 0.0, 0.3]);
            assert_eq!(c.iter().sum::<u64>(), n);
            assert_eq!(c[2], 0);
        }
    }

    #[test]
    fn remove_durations_examples() {
        let l = layout(14, 2, 2);
        let ds = simulate_dataset(&l, &ParameterSet::zeros(14, 0, 0), 1).unwrap();
        assert_eq!(remove_durations(&ds, &[]).unwrap(), ds);
        let r = remove_durations(&ds, &[4, 7, 11]).unwrap();
        assert!(r.strata.iter().all(|s| ![4, 7, 11].contains(&s.duration)));
        assert_eq!(r.max_duration, 14);
        assert_eq!(ParameterSet::for_dataset(&r).beta.values().len(), 105);
        let all: Vec<u32> = (1..=14).collect();
        assert!(remove_durations(&ds, &all).is_err());
        assert!(remove_durations(&ds, &[15]).is_err());
    }
}
