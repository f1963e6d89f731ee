//! CSV and JSON readers and writers for datasets, panels and results.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{validate_dataset, AnalyticDataset, RawUnit};
use crate::diagnostics::ParameterDiagnostics;
use crate::error::{EdvcmError, Result};
use crate::hmc::PosteriorDraws;
use crate::ingest::matching::{ExposureEvent, MatchReportRow, OutcomePanel, OutcomeRecord};
use crate::simulation::study::ReportRow;
use crate::summaries::{CumulativeMethod, CumulativeRow, SummaryRow};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// R-hat above this value is flagged in diagnostics output.
pub const RHAT_FLAG: f64 = 1.05;

/// Hex SHA-256 of a configuration serialization.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// First line of every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputHeader {
    pub command: String,
    pub config_hash: String,
}

impl OutputHeader {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        let json = serde_json::to_vec(config)?;
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash(&json),
        })
    }

    pub fn line(&self) -> String {
        format!(
            "# edvcm {ENGINE_VERSION} {} config_sha256={}",
            self.command, self.config_hash
        )
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{}", self.line())?;
        Ok(())
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

struct Columns {
    source: String,
    index: HashMap<String, usize>,
    names: Vec<String>,
}

impl Columns {
    fn new<R: Read>(source: &str, rdr: &mut csv::Reader<R>, required: &[&str]) -> Result<Self> {
        let headers = rdr
            .headers()
            .map_err(|e| EdvcmError::Parse(format!("{source}: {e}")))?
            .clone();
        let names: Vec<String> = headers.iter().map(str::to_string).collect();
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        if index.len() != names.len() {
            return Err(EdvcmError::Parse(format!("{source}: duplicate column names in header")));
        }
        let missing: Vec<&str> = required.iter().copied().filter(|c| !index.contains_key(*c)).collect();
        if !missing.is_empty() {
            return Err(EdvcmError::Parse(format!(
                "{source}: missing required column(s): {}",
                missing.join(", ")
            )));
        }
        Ok(Self {
            source: source.to_string(),
            index,
            names,
        })
    }

    fn with_prefix(&self, prefix: &str) -> Vec<(usize, String)> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, n)| (i, n.clone()))
            .collect()
    }

    fn error(&self, rec: &csv::StringRecord, msg: impl std::fmt::Display) -> EdvcmError {
        let line = rec.position().map_or(0, |p| p.line());
        EdvcmError::Parse(format!("{}: line {line}: {msg}", self.source))
    }

    fn raw<'r>(&self, rec: &'r csv::StringRecord, col: &str) -> &'r str {
        rec.get(self.index[col]).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, rec: &csv::StringRecord, col: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(rec, col);
        v.parse()
            .map_err(|e| self.error(rec, format_args!("column {col}: cannot parse {v:?}: {e}")))
    }

    fn optional<T: std::str::FromStr>(&self, rec: &csv::StringRecord, col: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(rec, col) {
            "" | "NA" => Ok(None),
            _ => self.parse(rec, col).map(Some),
        }
    }

    fn float_at(&self, rec: &csv::StringRecord, i: usize) -> Result<f64> {
        let v = rec.get(i).unwrap_or("");
        v.parse::<f64>()
            .map_err(|e| self.error(rec, format_args!("column {}: cannot parse {v:?}: {e}", self.names[i])))
    }

    fn date(&self, rec: &csv::StringRecord, col: &str) -> Result<NaiveDate> {
        let v = self.raw(rec, col);
        NaiveDate::parse_from_str(v, "%Y-%m-%d")
            .map_err(|e| self.error(rec, format_args!("column {col}: invalid ISO date {v:?}: {e}")))
    }
}

fn records<R: Read>(source: &str, rdr: &mut csv::Reader<R>) -> Result<Vec<csv::StringRecord>> {
    rdr.records()
        .map(|r| r.map_err(|e| EdvcmError::Parse(format!("{source}: {e}"))))
        .collect()
}

/// A dataset together with its covariate column names.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    pub dataset: AnalyticDataset,
    pub covariate_names: Vec<String>,
}

const DATASET_COLUMNS: [&str; 9] = ["unit_id", "stratum_id", "d", "t", "l", "A", "L", "Y", "P"];

/// Read the long-format dataset CSV (`cov_*` columns are covariates).
pub fn read_dataset<R: Read>(source: &str, input: R) -> Result<DatasetFile> {
    let mut rdr = reader(input);
    let cols = Columns::new(source, &mut rdr, &DATASET_COLUMNS[..])?;
    let cov_cols = cols.with_prefix("cov_");
    let mut raw = Vec::new();
    for rec in records(source, &mut rdr)? {
        let covariates = cov_cols
            .iter()
            .map(|(i, _)| cols.float_at(&rec, *i))
            .collect::<Result<Vec<_>>>()?;
        let unit = RawUnit {
            unit_id: cols.raw(&rec, "unit_id").to_string(),
            stratum_id: cols.raw(&rec, "stratum_id").to_string(),
            duration: cols.parse(&rec, "d")?,
            day: cols.optional(&rec, "t")?,
            lag: cols.optional(&rec, "l")?,
            exposed: cols.parse(&rec, "A")?,
            lag_indicator: cols.parse(&rec, "L")?,
            count: cols.parse(&rec, "Y")?,
            person_time: cols.parse(&rec, "P")?,
            covariates,
        };
        if unit.unit_id.is_empty() || unit.stratum_id.is_empty() {
            return Err(cols.error(&rec, "unit_id and stratum_id must be non-empty"));
        }
        raw.push(unit);
    }
    let dataset = validate_dataset(raw).map_err(|e| EdvcmError::Parse(format!("{source}: {e}")))?;
    Ok(DatasetFile {
        dataset,
        covariate_names: cov_cols.into_iter().map(|(_, n)| n).collect(),
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn covariate_header(names: &[String], dim: usize) -> Result<Vec<String>> {
    if names.len() != dim {
        return Err(EdvcmError::Dimension {
            context: "covariate names",
            expected: dim,
            got: names.len(),
        });
    }
    Ok(names
        .iter()
        .map(|n| if n.starts_with("cov_") { n.clone() } else { format!("cov_{n}") })
        .collect())
}

pub fn write_dataset<W: Write>(
    mut out: W,
    header: &OutputHeader,
    dataset: &AnalyticDataset,
    covariate_names: &[String],
) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = DATASET_COLUMNS.iter().map(|s| s.to_string()).collect();
    head.extend(covariate_header(covariate_names, dataset.covariate_dim)?);
    w.write_record(&head)?;
    for u in dataset.units() {
        let r = u.to_raw();
        let mut rec = vec![
            r.unit_id,
            r.stratum_id,
            r.duration.to_string(),
            opt(r.day),
            opt(r.lag),
            r.exposed.to_string(),
            r.lag_indicator.to_string(),
            r.count.to_string(),
            r.person_time.to_string(),
        ];
        rec.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Exposure events: `area_id, start_date, duration`.
pub fn read_exposures<R: Read>(source: &str, input: R) -> Result<Vec<ExposureEvent>> {
    let mut rdr = reader(input);
    let cols = Columns::new(source, &mut rdr, &["area_id", "start_date", "duration"])?;
    records(source, &mut rdr)?
        .iter()
        .map(|rec| {
            let duration: u32 = cols.parse(rec, "duration")?;
            if duration == 0 {
                return Err(cols.error(rec, "duration must be at least 1"));
            }
            Ok(ExposureEvent {
                area_id: cols.raw(rec, "area_id").to_string(),
                start_date: cols.date(rec, "start_date")?,
                duration,
            })
        })
        .collect()
}

/// Outcome panel: `area_id, date, count, person_time, cov_*`.
pub fn read_outcomes<R: Read>(source: &str, input: R) -> Result<OutcomePanel> {
    let mut rdr = reader(input);
    let cols = Columns::new(source, &mut rdr, &["area_id", "date", "count", "person_time"])?;
    let cov_cols = cols.with_prefix("cov_");
    let mut recs = Vec::new();
    for rec in records(source, &mut rdr)? {
        let person_time: f64 = cols.parse(&rec, "person_time")?;
        if !(person_time > 0.0 && person_time.is_finite()) {
            return Err(cols.error(&rec, format_args!("person_time must be positive, got {person_time}")));
        }
        recs.push(OutcomeRecord {
            area_id: cols.raw(&rec, "area_id").to_string(),
            date: cols.date(&rec, "date")?,
            count: cols.parse(&rec, "count")?,
            person_time,
            covariates: cov_cols
                .iter()
                .map(|(i, _)| cols.float_at(&rec, *i))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    OutcomePanel::new(cov_cols.into_iter().map(|(_, n)| n).collect(), recs)
        .map_err(|e| EdvcmError::Parse(format!("{source}: {e}")))
}

pub fn write_match_report<W: Write>(mut out: W, header: &OutputHeader, rows: &[MatchReportRow]) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["event_id", "area_id", "start_date", "duration", "status", "control_offsets", "detail"])?;
    for r in rows {
        let offsets: Vec<String> = r.control_offsets.iter().map(i32::to_string).collect();
        w.write_record([
            r.event_id.clone(),
            r.area_id.clone(),
            r.start_date.to_string(),
            r.duration.to_string(),
            r.status.as_str().to_string(),
            offsets.join(";"),
            r.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per retained draw: `chain, draw`, then every constrained parameter.
pub fn write_draws<W: Write>(mut out: W, header: &OutputHeader, draws: &PosteriorDraws) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["chain".to_string(), "draw".to_string()];
    head.extend(draws.names.iter().cloned());
    w.write_record(&head)?;
    for c in 0..draws.n_chains {
        for i in 0..draws.n_samples {
            let row = draws.row(c * draws.n_samples + i);
            let mut rec = vec![(c + 1).to_string(), (i + 1).to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(mut out: W, header: &OutputHeader, rows: &[SummaryRow]) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parameter", "d", "t_or_l", "mean", "rr_mean", "ci_lo", "ci_hi", "direction"])?;
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            opt(r.d),
            opt(r.t_or_l),
            r.mean.to_string(),
            opt(r.rr_mean),
            r.ci_lo.to_string(),
            r.ci_hi.to_string(),
            r.direction.map_or_else(String::new, |d| d.as_str().to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cumulative<W: Write>(mut out: W, header: &OutputHeader, rows: &[CumulativeRow]) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d", "method", "rr_mean", "ci_lo", "ci_hi", "direction"])?;
    for r in rows {
        let method = match r.method {
            CumulativeMethod::Unweighted => "unweighted",
            CumulativeMethod::CovariateWeighted => "covariate_weighted",
        };
        w.write_record([
            r.d.to_string(),
            method.to_string(),
            r.interval.mean.to_string(),
            r.interval.lower.to_string(),
            r.interval.upper.to_string(),
            r.direction.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format diagnostics: per-parameter R-hat and ESS, then per-chain sampler statistics.
///
/// `flag` is `rhat>1.05` for poorly mixed parameters and `divergent` when more
/// than 10% of a chain's transitions diverged.
pub fn write_diagnostics<W: Write>(
    mut out: W,
    header: &OutputHeader,
    params: &[ParameterDiagnostics],
    draws: &PosteriorDraws,
) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "name", "metric", "value", "flag"])?;
    for p in params {
        let flag = match p.rhat {
            Some(r) if !(r <= RHAT_FLAG) => "rhat>1.05",
            _ => "",
        };
        w.write_record(["parameter", &p.name, "rhat", &opt(p.rhat), flag])?;
        w.write_record(["parameter", &p.name, "ess_bulk", &p.ess_bulk.to_string(), ""])?;
    }
    for (c, s) in draws.chain_stats.iter().enumerate() {
        let chain = (c + 1).to_string();
        let frac = s.divergences as f64 / draws.n_samples.max(1) as f64;
        let div_flag = if frac > crate::hmc::DIVERGENCE_WARNING_FRACTION { "divergent" } else { "" };
        w.write_record(["chain", &chain, "divergences", &s.divergences.to_string(), div_flag])?;
        w.write_record(["chain", &chain, "step_size", &s.step_size.to_string(), ""])?;
        w.write_record(["chain", &chain, "mean_accept", &s.mean_accept.to_string(), ""])?;
        w.write_record(["chain", &chain, "leapfrog_steps", &s.leapfrog_steps.to_string(), ""])?;
    }
    w.flush()?;
    Ok(())
}

/// Any parameter whose R-hat exceeds the flag threshold.
pub fn rhat_flagged(params: &[ParameterDiagnostics]) -> Vec<&str> {
    params
        .iter()
        .filter(|p| p.rhat.is_some_and(|r| !(r <= RHAT_FLAG)))
        .map(|p| p.name.as_str())
        .collect()
}

pub fn write_report<W: Write>(mut out: W, header: &OutputHeader, rows: &[ReportRow]) -> Result<()> {
    header.write_to(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "parameter", "d", "t", "metric", "value"])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.to_string(),
            r.parameter.clone(),
            r.d.to_string(),
            r.t.to_string(),
            r.metric.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON sidecar recording how a set of outputs was produced.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance<'a, C: Serialize> {
    pub engine: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config_sha256: &'a str,
    pub config: &'a C,
    pub outputs: Vec<String>,
}

pub fn write_provenance<W: Write, C: Serialize>(
    mut out: W,
    header: &OutputHeader,
    config: &C,
    outputs: Vec<String>,
) -> Result<()> {
    let p = Provenance {
        engine: "edvcm",
        version: ENGINE_VERSION,
        command: &header.command,
        config_sha256: &header.config_hash,
        config,
        outputs,
    };
    serde_json::to_writer_pretty(&mut out, &p)?;
    writeln!(out)?;
    Ok(())
}
