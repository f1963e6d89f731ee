//! Units, strata and the validated analytic dataset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{EdvcmError, Result};

/// What a unit represents within its stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Exposed day `t` of an event.
    Exposure,
    /// Lag day `l` following an event.
    Lag,
    /// Matched control for exposed day `t`.
    ControlExposure,
    /// Matched control for lag day `l`.
    ControlLag,
}

impl Role {
    pub fn exposure_indicator(self) -> u8 {
        u8::from(self == Role::Exposure)
    }

    pub fn lag_indicator(self) -> u8 {
        u8::from(self == Role::Lag)
    }

    pub fn uses_day_index(self) -> bool {
        matches!(self, Role::Exposure | Role::ControlExposure)
    }
}

/// Day within the event (`t`) or day after its end (`l`); never both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DayIndex {
    Exposure(u32),
    Lag(u32),
}

/// One area-day observation belonging to a stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureUnit {
    pub unit_id: String,
    pub stratum_id: String,
    pub duration: u32,
    pub role: Role,
    pub index: DayIndex,
    pub count: u64,
    pub person_time: f64,
    pub covariates: Vec<f64>,
}

impl ExposureUnit {
    pub fn day(&self) -> Option<u32> {
        match self.index {
            DayIndex::Exposure(t) => Some(t),
            DayIndex::Lag(_) => None,
        }
    }

    pub fn lag(&self) -> Option<u32> {
        match self.index {
            DayIndex::Lag(l) => Some(l),
            DayIndex::Exposure(_) => None,
        }
    }

    pub fn to_raw(&self) -> RawUnit {
        RawUnit {
            unit_id: self.unit_id.clone(),
            stratum_id: self.stratum_id.clone(),
            duration: self.duration,
            day: self.day(),
            lag: self.lag(),
            exposed: self.role.exposure_indicator(),
            lag_indicator: self.role.lag_indicator(),
            count: self.count,
            person_time: self.person_time,
            covariates: self.covariates.clone(),
        }
    }
}

/// Unvalidated unit record as read from a file or produced by a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct RawUnit {
    pub unit_id: String,
    pub stratum_id: String,
    pub duration: u32,
    pub day: Option<u32>,
    pub lag: Option<u32>,
    pub exposed: u8,
    pub lag_indicator: u8,
    pub count: u64,
    pub person_time: f64,
    pub covariates: Vec<f64>,
}

impl RawUnit {
    fn into_unit(self) -> Result<ExposureUnit> {
        let fail = |reason: String| EdvcmError::Structure {
            unit_id: self.unit_id.clone(),
            reason,
        };
        if self.duration < 1 {
            return Err(fail("duration must be at least 1".into()));
        }
        if !(self.person_time > 0.0 && self.person_time.is_finite()) {
            return Err(fail(format!(
                "person-time must be positive, got {}",
                self.person_time
            )));
        }
        if self.covariates.iter().any(|c| !c.is_finite()) {
            return Err(fail("non-finite covariate value".into()));
        }
        if self.exposed > 1 || self.lag_indicator > 1 {
            return Err(fail("exposure and lag indicators must be 0 or 1".into()));
        }
        let (role, index) = match (self.day, self.lag) {
            (Some(_), Some(_)) => {
                return Err(fail("both day index t and lag index l are defined".into()))
            }
            (None, None) => return Err(fail("neither day index t nor lag index l is defined".into())),
            (Some(t), None) => {
                if t < 1 || t > self.duration {
                    return Err(fail(format!(
                        "day index t={t} outside 1..={} for duration d={}",
                        self.duration, self.duration
                    )));
                }
                if self.lag_indicator == 1 {
                    return Err(fail("lag indicator set on an exposure-day unit".into()));
                }
                let role = if self.exposed == 1 {
                    Role::Exposure
                } else {
                    Role::ControlExposure
                };
                (role, DayIndex::Exposure(t))
            }
            (None, Some(l)) => {
                if l < 1 {
                    return Err(fail("lag index must be at least 1".into()));
                }
                if self.exposed == 1 {
                    return Err(fail("exposure indicator set on a lag-day unit".into()));
                }
                let role = if self.lag_indicator == 1 {
                    Role::Lag
                } else {
                    Role::ControlLag
                };
                (role, DayIndex::Lag(l))
            }
        };
        Ok(ExposureUnit {
            unit_id: self.unit_id,
            stratum_id: self.stratum_id,
            duration: self.duration,
            role,
            index,
            count: self.count,
            person_time: self.person_time,
            covariates: self.covariates,
        })
    }
}

/// One event's exposed days, lag days and matched controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub stratum_id: String,
    pub duration: u32,
    pub units: Vec<ExposureUnit>,
    pub total: u64,
}

impl Stratum {
    /// Strata with no events contribute nothing to the conditional likelihood.
    pub fn is_zero_total(&self) -> bool {
        self.total == 0
    }
}

/// Validated collection of strata ready for likelihood evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticDataset {
    pub strata: Vec<Stratum>,
    pub max_duration: u32,
    pub max_lag: u32,
    pub covariate_dim: usize,
}

impl AnalyticDataset {
    pub fn zero_total_strata(&self) -> Vec<&str> {
        self.strata
            .iter()
            .filter(|s| s.is_zero_total())
            .map(|s| s.stratum_id.as_str())
            .collect()
    }

    pub fn n_units(&self) -> usize {
        self.strata.iter().map(|s| s.units.len()).sum()
    }

    pub fn units(&self) -> impl Iterator<Item = &ExposureUnit> {
        self.strata.iter().flat_map(|s| s.units.iter())
    }

    pub fn to_raw_units(&self) -> Vec<RawUnit> {
        self.units().map(ExposureUnit::to_raw).collect()
    }

    /// Durations that have at least one stratum.
    pub fn observed_durations(&self) -> Vec<u32> {
        let mut ds: Vec<u32> = self.strata.iter().map(|s| s.duration).collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    }

    /// Widen the coefficient grid beyond the observed maximum duration/lag.
    pub fn with_grid(mut self, max_duration: u32, max_lag: u32) -> Result<Self> {
        if max_duration < self.max_duration || max_lag < self.max_lag {
            return Err(EdvcmError::Config(format!(
                "grid ({max_duration}, {max_lag}) is smaller than the data ({}, {})",
                self.max_duration, self.max_lag
            )));
        }
        self.max_duration = max_duration;
        self.max_lag = max_lag;
        Ok(self)
    }
}

/// Assemble strata from raw units and enforce the structural invariants.
///
/// Stratum order follows first appearance in `raw`. Strata whose outcome
/// total is zero are kept and reported by [`AnalyticDataset::zero_total_strata`].
pub fn validate_dataset(raw: Vec<RawUnit>) -> Result<AnalyticDataset> {
    if raw.is_empty() {
        return Err(EdvcmError::Empty("dataset has no units"));
    }
    let covariate_dim = raw[0].covariates.len();
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Vec<ExposureUnit>> = HashMap::new();
    for r in raw {
        if r.covariates.len() != covariate_dim {
            return Err(EdvcmError::Structure {
                unit_id: r.unit_id.clone(),
                reason: format!(
                    "covariate vector has length {}, expected {covariate_dim}",
                    r.covariates.len()
                ),
            });
        }
        let unit = r.into_unit()?;
        let units = by_id.entry(unit.stratum_id.clone()).or_insert_with(|| {
            order.push(unit.stratum_id.clone());
            Vec::new()
        });
        units.push(unit);
    }

    let mut strata = Vec::with_capacity(order.len());
    let mut max_duration = 0;
    let mut max_lag = 0;
    for id in order {
        let units = by_id.remove(&id).expect("stratum recorded in order");
        let duration = units[0].duration;
        let mut seen_days = vec![false; duration as usize + 1];
        for u in &units {
            if u.duration != duration {
                return Err(EdvcmError::Structure {
                    unit_id: u.unit_id.clone(),
                    reason: format!(
                        "duration {} differs from stratum {id} duration {duration}",
                        u.duration
                    ),
                });
            }
            if let (Role::Exposure, DayIndex::Exposure(t)) = (u.role, u.index) {
                if std::mem::replace(&mut seen_days[t as usize], true) {
                    return Err(EdvcmError::Structure {
                        unit_id: u.unit_id.clone(),
                        reason: format!("exposure day t={t} appears twice in stratum {id}"),
                    });
                }
            }
            if let DayIndex::Lag(l) = u.index {
                max_lag = max_lag.max(l);
            }
        }
        max_duration = max_duration.max(duration);
        let total = units.iter().map(|u| u.count).sum();
        if units.len() < 2 {
            log::warn!("stratum {id} has a single unit; its probability is degenerate");
        }
        strata.push(Stratum {
            stratum_id: id,
            duration,
            units,
            total,
        });
    }

    Ok(AnalyticDataset {
        strata,
        max_duration,
        max_lag,
        covariate_dim,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn raw(
        id: &str,
        stratum: &str,
        d: u32,
        t: Option<u32>,
        l: Option<u32>,
        a: u8,
        y: u64,
    ) -> RawUnit {
        RawUnit {
            unit_id: id.into(),
            stratum_id: stratum.into(),
            duration: d,
            day: t,
            lag: l,
            exposed: a,
            lag_indicator: 0,
            count: y,
            person_time: 1.0,
            covariates: vec![],
        }
    }

    #[test]
    fn single_stratum() {
        let ds = validate_dataset(vec![
            raw("u1", "s1", 1, Some(1), None, 1, 3),
            raw("u2", "s1", 1, Some(1), None, 0, 1),
            raw("u3", "s1", 1, Some(1), None, 0, 2),
        ])
        .unwrap();
        assert_eq!(ds.max_duration, 1);
        assert_eq!(ds.strata.len(), 1);
        assert_eq!(ds.strata[0].total, 6);
        assert!(ds.zero_total_strata().is_empty());
    }

    #[test]
    fn day_beyond_duration_names_unit() {
        let err = validate_dataset(vec![
            raw("bad-unit", "s1", 3, Some(5), None, 1, 0),
            raw("u2", "s1", 3, Some(1), None, 0, 0),
        ])
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad-unit"), "{msg}");
        assert!(msg.contains("t=5"), "{msg}");
    }

    #[test]
    fn both_indices_rejected() {
        let err = validate_dataset(vec![raw("u1", "s1", 3, Some(1), Some(1), 0, 0)]).unwrap_err();
        assert!(matches!(err, EdvcmError::Structure { .. }));
        let err = validate_dataset(vec![raw("u1", "s1", 3, None, None, 0, 0)]).unwrap_err();
        assert!(matches!(err, EdvcmError::Structure { .. }));
    }

    #[test]
    fn nonpositive_person_time_rejected() {
        let mut u = raw("u1", "s1", 1, Some(1), None, 1, 0);
        u.person_time = 0.0;
        assert!(validate_dataset(vec![u]).is_err());
    }

    #[test]
    fn duplicate_exposure_day_rejected() {
        let err = validate_dataset(vec![
            raw("u1", "s1", 2, Some(1), None, 1, 0),
            raw("u2", "s1", 2, Some(1), None, 1, 0),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn zero_total_stratum_is_flagged() {
        let ds = validate_dataset(vec![
            raw("u1", "s1", 1, Some(1), None, 1, 0),
            raw("u2", "s1", 1, Some(1), None, 0, 0),
            raw("u3", "s2", 2, Some(2), None, 1, 4),
            raw("u4", "s2", 2, Some(2), None, 0, 1),
        ])
        .unwrap();
        assert_eq!(ds.zero_total_strata(), vec!["s1"]);
        assert_eq!(ds.max_duration, 2);
    }

    #[test]
    fn validation_is_idempotent() {
        let mut lagged = raw("u5", "s2", 2, None, Some(3), 0, 2);
        lagged.lag_indicator = 1;
        let ds = validate_dataset(vec![
            raw("u1", "s1", 1, Some(1), None, 1, 0),
            raw("u2", "s1", 1, Some(1), None, 0, 0),
            raw("u3", "s2", 2, Some(2), None, 1, 4),
            raw("u4", "s2", 2, Some(2), None, 0, 1),
            lagged,
        ])
        .unwrap();
        assert_eq!(ds.max_lag, 3);
        let again = validate_dataset(ds.to_raw_units()).unwrap();
        assert_eq!(again, ds);
    }
}
