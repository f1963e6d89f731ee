//! Match exposure events to same-calendar-day control years.

use std::collections::{BTreeMap, HashMap};

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::spline::{build_covariate_design, NaturalSplineBasis};
use crate::dataset::{validate_dataset, AnalyticDataset, RawUnit};
use crate::error::{EdvcmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub n_control_years: u32,
    pub post_event_exclusion_days: u32,
    pub lag_days: u32,
    pub max_duration: Option<u32>,
    /// Largest year offset searched on either side of the event year.
    pub max_year_offset: u32,
    /// Natural-spline degrees of freedom per covariate; raw covariates when unset.
    pub covariate_df: Option<usize>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            n_control_years: 2,
            post_event_exclusion_days: 28,
            lag_days: 0,
            max_duration: None,
            max_year_offset: 10,
            covariate_df: None,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_control_years == 0 {
            return Err(EdvcmError::Config("n_control_years must be at least 1".into()));
        }
        if self.max_year_offset * 2 < self.n_control_years {
            return Err(EdvcmError::Config(
                "max_year_offset is too small to find the requested control years".into(),
            ));
        }
        if self.max_duration == Some(0) {
            return Err(EdvcmError::Config("max_duration must be at least 1".into()));
        }
        if self.covariate_df == Some(0) {
            return Err(EdvcmError::Config("covariate_df must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureEvent {
    pub area_id: String,
    pub start_date: NaiveDate,
    pub duration: u32,
}

impl ExposureEvent {
    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Duration::days(i64::from(self.duration) - 1)
    }

    pub fn id(&self) -> String {
        format!("{}:{}", self.area_id, self.start_date)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub area_id: String,
    pub date: NaiveDate,
    pub count: u64,
    pub person_time: f64,
    pub covariates: Vec<f64>,
}

/// Daily outcomes indexed by area and date.
#[derive(Debug, Clone, Default)]
pub struct OutcomePanel {
    pub covariate_names: Vec<String>,
    rows: HashMap<(String, NaiveDate), OutcomeRecord>,
}

impl OutcomePanel {
    pub fn new(covariate_names: Vec<String>, records: Vec<OutcomeRecord>) -> Result<Self> {
        let mut rows = HashMap::with_capacity(records.len());
        for r in records {
            if r.covariates.len() != covariate_names.len() {
                return Err(EdvcmError::Dimension {
                    context: "outcome covariates",
                    expected: covariate_names.len(),
                    got: r.covariates.len(),
                });
            }
            let key = (r.area_id.clone(), r.date);
            if rows.contains_key(&key) {
                return Err(EdvcmError::Matching(format!(
                    "duplicate outcome record for area {} on {}",
                    key.0, key.1
                )));
            }
            rows.insert(key, r);
        }
        Ok(Self { covariate_names, rows })
    }

    pub fn get(&self, area: &str, date: NaiveDate) -> Option<&OutcomeRecord> {
        self.rows.get(&(area.to_string(), date))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Exposed days of every event per area, with the post-event exclusion appended.
#[derive(Debug, Clone, Default)]
pub struct ExposureCalendar {
    exposed: HashMap<String, Vec<(NaiveDate, NaiveDate)>>,
    excluded: HashMap<String, Vec<(NaiveDate, NaiveDate)>>,
}

fn overlaps(a: (NaiveDate, NaiveDate), b: (NaiveDate, NaiveDate)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

impl ExposureCalendar {
    /// Errors when two events in the same area overlap.
    pub fn new(events: &[ExposureEvent], exclusion_days: u32) -> Result<Self> {
        let mut cal = Self::default();
        let mut by_area: BTreeMap<&str, Vec<&ExposureEvent>> = BTreeMap::new();
        for e in events {
            if e.duration == 0 {
                return Err(EdvcmError::Matching(format!("event {} has zero duration", e.id())));
            }
            by_area.entry(&e.area_id).or_default().push(e);
        }
        for (area, mut evs) in by_area {
            evs.sort_by_key(|e| e.start_date);
            for w in evs.windows(2) {
                if w[1].start_date <= w[0].end_date() {
                    return Err(EdvcmError::Matching(format!(
                        "overlapping events in area {area}: {} and {}",
                        w[0].id(),
                        w[1].id()
                    )));
                }
            }
            let exposed: Vec<_> = evs.iter().map(|e| (e.start_date, e.end_date())).collect();
            let excluded = evs
                .iter()
                .map(|e| (e.start_date, e.end_date() + Duration::days(i64::from(exclusion_days))))
                .collect();
            cal.exposed.insert(area.to_string(), exposed);
            cal.excluded.insert(area.to_string(), excluded);
        }
        Ok(cal)
    }

    /// True when no day of `window` is an exposed day in `area`.
    pub fn is_unexposed(&self, area: &str, window: (NaiveDate, NaiveDate)) -> bool {
        self.exposed
            .get(area)
            .map_or(true, |ws| ws.iter().all(|&w| !overlaps(w, window)))
    }

    /// True when no day of `window` falls in an exposure or its exclusion period.
    pub fn is_clear(&self, area: &str, window: (NaiveDate, NaiveDate)) -> bool {
        self.excluded
            .get(area)
            .map_or(true, |ws| ws.iter().all(|&w| !overlaps(w, window)))
    }
}

/// The same calendar day in `year`; Feb 29 maps to Feb 28 in non-leap years.
pub fn same_day_in_year(date: NaiveDate, year: i32) -> Option<NaiveDate> {
    NaiveDate::from_ymd_opt(year, date.month(), date.day()).or_else(|| {
        (date.month() == 2 && date.day() == 29)
            .then(|| NaiveDate::from_ymd_opt(year, 2, 28))
            .flatten()
    })
}

/// Offsets searched in the order -1, +1, -2, +2, ...
pub fn offset_order(max_offset: u32) -> impl Iterator<Item = i32> {
    (1..=max_offset as i32).flat_map(|k| [-k, k])
}

/// Year offsets of the first `n_control_years` eligible control windows.
///
/// A candidate is eligible when its window of `d + post_event_exclusion_days`
/// days contains no exposed day and its unit days (event and lag days) avoid
/// every exposure and exclusion period. Returns the offsets found, which may
/// be fewer than requested.
pub fn find_control_years(event: &ExposureEvent, calendar: &ExposureCalendar, config: &MatchConfig) -> Vec<i32> {
    let d = i64::from(event.duration);
    let mut found = Vec::new();
    for off in offset_order(config.max_year_offset) {
        let Some(start) = same_day_in_year(event.start_date, event.start_date.year() + off) else {
            continue;
        };
        let window = (
            start,
            start + Duration::days(d + i64::from(config.post_event_exclusion_days) - 1),
        );
        let units_end = start + Duration::days(d + i64::from(config.lag_days) - 1);
        if !calendar.is_unexposed(&event.area_id, window) || !calendar.is_clear(&event.area_id, (start, units_end)) {
            continue;
        }
        found.push(off);
        if found.len() == config.n_control_years as usize {
            break;
        }
    }
    found
}

/// Units of one event: exposed days, lag days, then each control year in offset order.
pub fn assemble_stratum(
    event: &ExposureEvent,
    offsets: &[i32],
    panel: &OutcomePanel,
    config: &MatchConfig,
) -> Result<Vec<RawUnit>> {
    let sid = event.id();
    let d = event.duration;
    let mut out = Vec::new();
    let mut push = |date: NaiveDate, t: Option<u32>, l: Option<u32>, exposed: bool| -> Result<()> {
        let rec = panel.get(&event.area_id, date).ok_or_else(|| {
            EdvcmError::Matching(format!("no outcome record for area {} on {date}", event.area_id))
        })?;
        out.push(RawUnit {
            unit_id: format!("{}:{date}", event.area_id),
            stratum_id: sid.clone(),
            duration: d,
            day: t,
            lag: l,
            exposed: u8::from(exposed && t.is_some()),
            lag_indicator: u8::from(exposed && l.is_some()),
            count: rec.count,
            person_time: rec.person_time,
            covariates: rec.covariates.clone(),
        });
        Ok(())
    };
    let mut add_block = |start: NaiveDate, exposed: bool| -> Result<()> {
        for t in 1..=d {
            push(start + Duration::days(i64::from(t) - 1), Some(t), None, exposed)?;
        }
        for l in 1..=config.lag_days {
            push(start + Duration::days(i64::from(d + l) - 1), None, Some(l), exposed)?;
        }
        Ok(())
    };
    add_block(event.start_date, true)?;
    for &off in offsets {
        let start = same_day_in_year(event.start_date, event.start_date.year() + off)
            .ok_or_else(|| EdvcmError::Matching(format!("no control date at offset {off}")))?;
        add_block(start, false)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStatus {
    Matched,
    /// Fewer eligible control years than requested.
    Unmatched,
    /// Exposed or lag days missing from the outcome panel.
    MissingOutcomes,
    ExceedsMaxDuration,
}

impl MatchStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MatchStatus::Matched => "matched",
            MatchStatus::Unmatched => "unmatched",
            MatchStatus::MissingOutcomes => "missing_outcomes",
            MatchStatus::ExceedsMaxDuration => "exceeds_max_duration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReportRow {
    pub event_id: String,
    pub area_id: String,
    pub start_date: NaiveDate,
    pub duration: u32,
    pub status: MatchStatus,
    pub control_offsets: Vec<i32>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub dataset: AnalyticDataset,
    pub report: Vec<MatchReportRow>,
    pub covariate_names: Vec<String>,
    pub spline_bases: Vec<NaturalSplineBasis>,
}

/// Match every event, assemble strata and validate the analytic dataset.
pub fn match_events(events: &[ExposureEvent], panel: &OutcomePanel, config: &MatchConfig) -> Result<MatchOutput> {
    config.validate()?;
    let calendar = ExposureCalendar::new(events, config.post_event_exclusion_days)?;
    let mut ordered: Vec<&ExposureEvent> = events.iter().collect();
    ordered.sort_by(|a, b| (&a.area_id, a.start_date).cmp(&(&b.area_id, b.start_date)));
    let mut report = Vec::with_capacity(events.len());
    let mut raw = Vec::new();
    for e in ordered {
        let mut row = MatchReportRow {
            event_id: e.id(),
            area_id: e.area_id.clone(),
            start_date: e.start_date,
            duration: e.duration,
            status: MatchStatus::Matched,
            control_offsets: vec![],
            detail: String::new(),
        };
        if config.max_duration.is_some_and(|m| e.duration > m) {
            row.status = MatchStatus::ExceedsMaxDuration;
            row.detail = format!("duration {} exceeds {}", e.duration, config.max_duration.unwrap_or(0));
            report.push(row);
            continue;
        }
        let offsets = find_control_years(e, &calendar, config);
        row.control_offsets = offsets.clone();
        if offsets.len() < config.n_control_years as usize {
            row.status = MatchStatus::Unmatched;
            row.detail = format!(
                "{} of {} control years within +/-{} years",
                offsets.len(),
                config.n_control_years,
                config.max_year_offset
            );
            report.push(row);
            continue;
        }
        match assemble_stratum(e, &offsets, panel, config) {
            Ok(units) => raw.extend(units),
            Err(err) => {
                row.status = MatchStatus::MissingOutcomes;
                row.detail = err.to_string();
            }
        }
        report.push(row);
    }
    if raw.is_empty() {
        return Err(EdvcmError::Matching("no event could be matched".into()));
    }
    let (covariate_names, spline_bases) = match config.covariate_df {
        Some(df) if !panel.covariate_names.is_empty() => {
            let rows: Vec<Vec<f64>> = raw.iter().map(|u| u.covariates.clone()).collect();
            let (expanded, bases) = build_covariate_design(&rows, df)?;
            for (u, c) in raw.iter_mut().zip(expanded) {
                u.covariates = c;
            }
            let names = panel
                .covariate_names
                .iter()
                .flat_map(|n| (1..=df).map(move |k| format!("{n}_ns{k}")))
                .collect();
            (names, bases)
        }
        _ => (panel.covariate_names.clone(), vec![]),
    };
    let mut dataset = validate_dataset(raw)?;
    if config.lag_days > 0 {
        dataset.max_lag = config.lag_days;
    }
    Ok(MatchOutput {
        dataset,
        report,
        covariate_names,
        spline_bases,
    })
}
