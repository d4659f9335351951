//! CSV ingestion with row-level validation.
//!
//! Unparsable fields and header mismatches are schema violations and fail
//! the whole ingest; values that parse but break a domain invariant (RH
//! above 100 %, positive predawn LWP, ...) reject their row and are listed
//! in the ingest report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use vinestress::aggregate::FruitSample;
use vinestress::kstar::LwpRecord;
use vinestress::meteo::HourlyMeteoRecord;
use vinestress::phenology::Stage;
use vinestress::Treatment;

use crate::error::PipelineError;
use crate::store::Project;

pub const METEO_HEADER: &[&str] = &[
    "timestamp",
    "temp_air",
    "rel_humidity",
    "wind_speed",
    "solar_radiation",
    "precipitation",
];
pub const SAPFLOW_HEADER: &[&str] = &["timestamp", "sensor_id", "plot_id", "treatment", "rate_g_per_h"];
pub const PHENOLOGY_HEADER: &[&str] = &["plot_id", "stage", "date"];
pub const LWP_HEADER: &[&str] = &["plot_id", "treatment", "date", "lwp_mpa"];
pub const FRUIT_HEADER: &[&str] = &[
    "plot_id",
    "treatment",
    "date",
    "berry_weight",
    "sugar",
    "acidity",
    "anthocyanins",
    "assimilable_nitrogen",
];

pub const PHENOLOGY_FILE: &str = "data/phenology.csv";
pub const LWP_FILE: &str = "data/lwp.csv";
pub const FRUIT_FILE: &str = "data/fruit.csv";

pub fn meteo_file(site: &str) -> String {
    format!("data/meteo/{site}.csv")
}

pub const SAPFLOW_DIR: &str = "data/sapflow";

/// Sensors are stored under their plot-treatment, so listing the directory
/// enumerates the plot-treatments with data.
pub fn sapflow_file(plot: &str, treatment: Treatment, sensor: &str) -> String {
    format!("{SAPFLOW_DIR}/{plot}_{treatment}/{sensor}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Meteo,
    Sapflow,
    Phenology,
    Lwp,
    Fruit,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Meteo => "meteo",
            Kind::Sapflow => "sapflow",
            Kind::Phenology => "phenology",
            Kind::Lwp => "lwp",
            Kind::Fruit => "fruit",
        }
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meteo" => Ok(Kind::Meteo),
            "sapflow" => Ok(Kind::Sapflow),
            "phenology" => Ok(Kind::Phenology),
            "lwp" => Ok(Kind::Lwp),
            "fruit" => Ok(Kind::Fruit),
            other => Err(format!("unknown data kind '{other}'")),
        }
    }
}

/// One validation finding, positioned in the source file (1-based line,
/// header is line 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub file: String,
    pub line: usize,
    pub column: Option<String>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.file, self.line)?;
        if let Some(c) = &self.column {
            write!(f, " column {c}")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kind: Kind,
    pub files: Vec<String>,
    pub accepted_rows: usize,
    pub rejected: Vec<Issue>,
    /// Artifacts written by this ingest.
    pub artifacts: Vec<String>,
}

struct Table {
    file: String,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_table(path: &Path, shown: &str, header: &[&str]) -> Result<Table, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PipelineError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let schema_err = |line: usize, column: Option<String>, message: String| PipelineError::Schema {
        file: shown.to_string(),
        issues: vec![Issue {
            file: shown.to_string(),
            line,
            column,
            message,
        }],
    };
    let found = rdr
        .headers()
        .map_err(|e| schema_err(1, None, e.to_string()))?
        .clone();
    if found.len() != header.len() {
        return Err(schema_err(
            1,
            None,
            format!("expected {} columns ({}), found {}", header.len(), header.join(","), found.len()),
        ));
    }
    for (i, (f, h)) in found.iter().zip(header).enumerate() {
        if f != *h {
            return Err(schema_err(1, Some(h.to_string()), format!("column {} is '{f}', expected '{h}'", i + 1)));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            schema_err(line, None, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, rec));
    }
    Ok(Table {
        file: shown.to_string(),
        rows,
    })
}

/// Collects hard (schema) and soft (row rejection) findings for one table.
struct Check<'a> {
    table: &'a Table,
    header: &'a [&'a str],
    hard: Vec<Issue>,
    soft: Vec<Issue>,
}

impl<'a> Check<'a> {
    fn new(table: &'a Table, header: &'a [&'a str]) -> Self {
        Check {
            table,
            header,
            hard: Vec::new(),
            soft: Vec::new(),
        }
    }

    fn issue(&self, line: usize, col: usize, message: String) -> Issue {
        Issue {
            file: self.table.file.clone(),
            line,
            column: Some(self.header[col].to_string()),
            message,
        }
    }

    fn field<'r>(&self, rec: &'r csv::StringRecord, col: usize) -> &'r str {
        rec.get(col).unwrap_or("")
    }

    fn parse<T: FromStr>(&mut self, line: usize, rec: &csv::StringRecord, col: usize, what: &str) -> Option<T> {
        let raw = self.field(rec, col);
        if raw.is_empty() {
            let i = self.issue(line, col, format!("missing {what}"));
            self.hard.push(i);
            return None;
        }
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                let i = self.issue(line, col, format!("cannot parse '{raw}' as {what}"));
                self.hard.push(i);
                None
            }
        }
    }

    /// Empty field is `Ok(None)`.
    fn optional_number(&mut self, line: usize, rec: &csv::StringRecord, col: usize) -> Option<Option<f64>> {
        let raw = self.field(rec, col);
        if raw.is_empty() {
            return Some(None);
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Some(Some(v)),
            _ => {
                let i = self.issue(line, col, format!("cannot parse '{raw}' as a number"));
                self.hard.push(i);
                None
            }
        }
    }

    fn number(&mut self, line: usize, rec: &csv::StringRecord, col: usize) -> Option<f64> {
        let v: f64 = self.parse(line, rec, col, "a number")?;
        if v.is_finite() {
            Some(v)
        } else {
            let i = self.issue(line, col, "non-finite number".into());
            self.hard.push(i);
            None
        }
    }

    fn timestamp(&mut self, line: usize, rec: &csv::StringRecord, col: usize) -> Option<NaiveDateTime> {
        let raw = self.field(rec, col);
        let parsed = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok());
        if parsed.is_none() {
            let i = self.issue(line, col, format!("cannot parse '{raw}' as an ISO-8601 timestamp"));
            self.hard.push(i);
        }
        parsed
    }

    fn date(&mut self, line: usize, rec: &csv::StringRecord, col: usize) -> Option<NaiveDate> {
        let raw = self.field(rec, col);
        let parsed = NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok();
        if parsed.is_none() {
            let i = self.issue(line, col, format!("cannot parse '{raw}' as a YYYY-MM-DD date"));
            self.hard.push(i);
        }
        parsed
    }

    fn treatment(&mut self, line: usize, rec: &csv::StringRecord, col: usize) -> Option<Treatment> {
        let raw = self.field(rec, col);
        match raw.parse() {
            Ok(t) => Some(t),
            Err(e) => {
                let i = self.issue(line, col, e);
                self.hard.push(i);
                None
            }
        }
    }

    fn reject(&mut self, line: usize, col: usize, message: String) {
        let i = self.issue(line, col, message);
        self.soft.push(i);
    }

    fn plot(&mut self, project: &Project, line: usize, rec: &csv::StringRecord, col: usize) -> Option<String> {
        let id = self.field(rec, col).to_string();
        if project.config.plot(&id).is_none() {
            self.reject(line, col, format!("plot '{id}' is not declared in the configuration"));
            return None;
        }
        Some(id)
    }
}

fn duplicates_error<K: fmt::Debug>(file: &str, dups: &[(K, usize, usize)], what: &str) -> PipelineError {
    PipelineError::Schema {
        file: file.to_string(),
        issues: dups
            .iter()
            .map(|(k, first, again)| Issue {
                file: file.to_string(),
                line: *again,
                column: None,
                message: format!("duplicate {what} {k:?} (first at line {first})"),
            })
            .collect(),
    }
}

fn finish(file: &str, check: Check) -> Result<Vec<Issue>, PipelineError> {
    if check.hard.is_empty() {
        Ok(check.soft)
    } else {
        Err(PipelineError::Schema {
            file: file.to_string(),
            issues: check.hard,
        })
    }
}

/// Ingest `files` of one kind into the store. `site` names the weather
/// station for meteo files; each file's stem is used when absent.
pub fn ingest(project: &Project, kind: Kind, files: &[PathBuf], site: Option<&str>) -> Result<IngestReport, PipelineError> {
    if files.is_empty() {
        return Err(PipelineError::Validation("no input files".into()));
    }
    let sources: Vec<String> = files.iter().map(|f| project.source_key(f)).collect();
    let shown: Vec<String> = sources.iter().map(|s| s[crate::store::SOURCE_PREFIX.len()..].to_string()).collect();
    let mut report = IngestReport {
        kind,
        files: shown.clone(),
        accepted_rows: 0,
        rejected: Vec::new(),
        artifacts: Vec::new(),
    };
    match kind {
        Kind::Meteo => {
            if site.is_some() && files.len() > 1 {
                return Err(PipelineError::Validation("--site applies to a single meteo file".into()));
            }
            for ((path, shown), source) in files.iter().zip(&shown).zip(&sources) {
                let name = match site {
                    Some(s) => s.to_string(),
                    None => path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                };
                if project.config.site(&name).is_none() {
                    return Err(PipelineError::Validation(format!(
                        "{shown}: site '{name}' is not declared in the configuration (use --site)"
                    )));
                }
                let (records, rejected) = parse_meteo(path, shown)?;
                report.accepted_rows += records.len();
                report.rejected.extend(rejected);
                let rel = meteo_file(&name);
                project.write_csv(&rel, &records, "ingest", std::slice::from_ref(source))?;
                report.artifacts.push(rel);
                crate::pipeline::stage_meteo(project, &name)?;
                report.artifacts.push(crate::pipeline::dailies_file(&name));
            }
        }
        Kind::Sapflow => {
            let mut by_sensor: BTreeMap<String, Vec<SapRow>> = BTreeMap::new();
            for (path, shown) in files.iter().zip(&shown) {
                let (rows, rejected) = parse_sapflow(project, path, shown)?;
                report.rejected.extend(rejected);
                for r in rows {
                    by_sensor.entry(r.sensor_id.clone()).or_default().push(r);
                }
            }
            for (sensor, mut rows) in by_sensor {
                if sensor.is_empty() || sensor.contains(['/', '\\']) {
                    return Err(PipelineError::Validation(format!("invalid sensor id '{sensor}'")));
                }
                let first = (&rows[0].plot_id, rows[0].treatment);
                if let Some(r) = rows.iter().find(|r| (&r.plot_id, r.treatment) != first) {
                    return Err(PipelineError::Validation(format!(
                        "sensor {sensor} reports for both {}/{} and {}/{}",
                        first.0, first.1, r.plot_id, r.treatment
                    )));
                }
                rows.sort_by_key(|r| r.timestamp);
                let dups: Vec<_> = rows
                    .windows(2)
                    .filter(|w| w[0].timestamp == w[1].timestamp)
                    .map(|w| (w[0].timestamp.to_string(), 0, 0))
                    .collect();
                if !dups.is_empty() {
                    return Err(PipelineError::Validation(format!(
                        "sensor {sensor}: duplicate timestamps {}",
                        dups.iter().map(|d| d.0.as_str()).collect::<Vec<_>>().join(", ")
                    )));
                }
                report.accepted_rows += rows.len();
                let rel = sapflow_file(&rows[0].plot_id, rows[0].treatment, &sensor);
                project.write_csv(&rel, &rows, "ingest", &sources)?;
                report.artifacts.push(rel);
            }
        }
        Kind::Phenology => {
            let mut all = Vec::new();
            for (path, shown) in files.iter().zip(&shown) {
                let (rows, rejected) = parse_phenology(project, path, shown)?;
                report.rejected.extend(rejected);
                all.extend(rows);
            }
            let mut seen = BTreeSet::new();
            for r in &all {
                if !seen.insert((r.plot_id.clone(), r.stage)) {
                    return Err(PipelineError::Validation(format!(
                        "duplicate phenology entry for {} {}",
                        r.plot_id, r.stage
                    )));
                }
            }
            all.sort_by(|a, b| (&a.plot_id, a.stage).cmp(&(&b.plot_id, b.stage)));
            report.accepted_rows = all.len();
            project.write_csv(PHENOLOGY_FILE, &all, "ingest", &sources)?;
            report.artifacts.push(PHENOLOGY_FILE.into());
        }
        Kind::Lwp => {
            let mut all = Vec::new();
            for (path, shown) in files.iter().zip(&shown) {
                let (rows, rejected) = parse_lwp(project, path, shown)?;
                report.rejected.extend(rejected);
                all.extend(rows);
            }
            all.sort_by(|a, b| (&a.plot_id, a.treatment, a.date).cmp(&(&b.plot_id, b.treatment, b.date)));
            if let Some(w) = all
                .windows(2)
                .find(|w| (&w[0].plot_id, w[0].treatment, w[0].date) == (&w[1].plot_id, w[1].treatment, w[1].date))
            {
                return Err(PipelineError::Validation(format!(
                    "duplicate LWP reading for {}/{} on {}",
                    w[0].plot_id, w[0].treatment, w[0].date
                )));
            }
            report.accepted_rows = all.len();
            project.write_csv(LWP_FILE, &all, "ingest", &sources)?;
            report.artifacts.push(LWP_FILE.into());
        }
        Kind::Fruit => {
            let mut all = Vec::new();
            for (path, shown) in files.iter().zip(&shown) {
                let (rows, rejected) = parse_fruit(project, path, shown)?;
                report.rejected.extend(rejected);
                all.extend(rows);
            }
            all.sort_by(|a, b| (&a.plot_id, a.treatment, a.date).cmp(&(&b.plot_id, b.treatment, b.date)));
            if let Some(w) = all
                .windows(2)
                .find(|w| (&w[0].plot_id, w[0].treatment, w[0].date) == (&w[1].plot_id, w[1].treatment, w[1].date))
            {
                return Err(PipelineError::Validation(format!(
                    "duplicate fruit sample for {}/{} on {}",
                    w[0].plot_id, w[0].treatment, w[0].date
                )));
            }
            report.accepted_rows = all.len();
            project.write_csv(FRUIT_FILE, &all, "ingest", &sources)?;
            report.artifacts.push(FRUIT_FILE.into());
        }
    }
    let rel = format!("reports/ingest_{}.json", kind.name());
    project.write_json(&rel, &report, "ingest", &[])?;
    project.save_manifest()?;
    Ok(report)
}

pub fn parse_meteo(path: &Path, shown: &str) -> Result<(Vec<HourlyMeteoRecord>, Vec<Issue>), PipelineError> {
    let table = read_table(path, shown, METEO_HEADER)?;
    let mut check = Check::new(&table, METEO_HEADER);
    let mut out: Vec<(usize, HourlyMeteoRecord)> = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let ts = check.timestamp(line, rec, 0);
        let mut vals = [0.0; 5];
        let mut missing = None;
        let mut ok = ts.is_some();
        for (k, v) in vals.iter_mut().enumerate() {
            match check.optional_number(line, rec, k + 1) {
                Some(Some(x)) => *v = x,
                Some(None) => missing = missing.or(Some(k + 1)),
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        if let Some(col) = missing {
            check.reject(line, col, "missing value".into());
            continue;
        }
        let r = HourlyMeteoRecord {
            timestamp: ts.expect("checked"),
            temp_air: vals[0],
            rel_humidity: vals[1],
            wind_speed: vals[2],
            solar_radiation: vals[3],
            precipitation: vals[4],
        };
        if let Err(e) = r.validate() {
            let col = match e {
                vinestress::meteo::MeteoError::Humidity(_) => 2,
                vinestress::meteo::MeteoError::Negative { field, .. } => {
                    METEO_HEADER.iter().position(|h| *h == field).unwrap_or(0)
                }
                _ => 0,
            };
            check.reject(line, col, e.to_string());
            continue;
        }
        out.push((line, r));
    }
    let rejected = finish(shown, check)?;
    out.sort_by_key(|(_, r)| r.timestamp);
    let dups: Vec<_> = out
        .windows(2)
        .filter(|w| w[0].1.timestamp == w[1].1.timestamp)
        .map(|w| (w[0].1.timestamp, w[0].0, w[1].0))
        .collect();
    if !dups.is_empty() {
        return Err(duplicates_error(shown, &dups, "timestamp"));
    }
    Ok((out.into_iter().map(|(_, r)| r).collect(), rejected))
}

/// One raw sap-flow reading, as stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SapRow {
    pub timestamp: NaiveDateTime,
    pub sensor_id: String,
    pub plot_id: String,
    pub treatment: Treatment,
    pub rate_g_per_h: Option<f64>,
}

fn parse_sapflow(project: &Project, path: &Path, shown: &str) -> Result<(Vec<SapRow>, Vec<Issue>), PipelineError> {
    let table = read_table(path, shown, SAPFLOW_HEADER)?;
    let mut check = Check::new(&table, SAPFLOW_HEADER);
    let mut out = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let ts = check.timestamp(line, rec, 0);
        let sensor = check.field(rec, 1).to_string();
        let treatment = check.treatment(line, rec, 3);
        let rate = check.optional_number(line, rec, 4);
        let (Some(ts), Some(treatment), Some(rate)) = (ts, treatment, rate) else {
            continue;
        };
        if sensor.is_empty() {
            check.reject(line, 1, "missing sensor id".into());
            continue;
        }
        let Some(plot) = check.plot(project, line, rec, 2) else { continue };
        out.push(SapRow {
            timestamp: ts,
            sensor_id: sensor,
            plot_id: plot,
            treatment,
            rate_g_per_h: rate,
        });
    }
    let rejected = finish(shown, check)?;
    Ok((out, rejected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenologyRow {
    pub plot_id: String,
    pub stage: Stage,
    pub date: NaiveDate,
}

fn parse_phenology(project: &Project, path: &Path, shown: &str) -> Result<(Vec<PhenologyRow>, Vec<Issue>), PipelineError> {
    let table = read_table(path, shown, PHENOLOGY_HEADER)?;
    let mut check = Check::new(&table, PHENOLOGY_HEADER);
    let mut out = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let raw = check.field(rec, 1).to_string();
        let stage = Stage::from_name(&raw);
        if stage.is_none() {
            let i = check.issue(line, 1, format!("unknown stage '{raw}'"));
            check.hard.push(i);
        }
        let date = check.date(line, rec, 2);
        let (Some(stage), Some(date)) = (stage, date) else { continue };
        let Some(plot) = check.plot(project, line, rec, 0) else { continue };
        out.push(PhenologyRow {
            plot_id: plot,
            stage,
            date,
        });
    }
    let rejected = finish(shown, check)?;
    Ok((out, rejected))
}

fn parse_lwp(project: &Project, path: &Path, shown: &str) -> Result<(Vec<LwpRecord>, Vec<Issue>), PipelineError> {
    let table = read_table(path, shown, LWP_HEADER)?;
    let mut check = Check::new(&table, LWP_HEADER);
    let mut out = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let treatment = check.treatment(line, rec, 1);
        let date = check.date(line, rec, 2);
        let lwp = check.number(line, rec, 3);
        let (Some(treatment), Some(date), Some(lwp)) = (treatment, date, lwp) else {
            continue;
        };
        if lwp > 0.0 {
            check.reject(line, 3, format!("predawn leaf water potential must be <= 0 MPa, got {lwp}"));
            continue;
        }
        let Some(plot) = check.plot(project, line, rec, 0) else { continue };
        out.push(LwpRecord {
            plot_id: plot,
            treatment,
            date,
            lwp_mpa: lwp,
        });
    }
    let rejected = finish(shown, check)?;
    Ok((out, rejected))
}

fn parse_fruit(project: &Project, path: &Path, shown: &str) -> Result<(Vec<FruitSample>, Vec<Issue>), PipelineError> {
    let table = read_table(path, shown, FRUIT_HEADER)?;
    let mut check = Check::new(&table, FRUIT_HEADER);
    let mut out = Vec::new();
    for (line, rec) in &table.rows {
        let line = *line;
        let treatment = check.treatment(line, rec, 1);
        let date = check.date(line, rec, 2);
        let bw = check.number(line, rec, 3);
        let sugar = check.number(line, rec, 4);
        let acidity = check.number(line, rec, 5);
        let antho = check.optional_number(line, rec, 6);
        let nitrogen = check.optional_number(line, rec, 7);
        let (Some(treatment), Some(date), Some(bw), Some(sugar), Some(acidity), Some(antho), Some(nitrogen)) =
            (treatment, date, bw, sugar, acidity, antho, nitrogen)
        else {
            continue;
        };
        let negative = [(3, Some(bw)), (4, Some(sugar)), (5, Some(acidity)), (6, antho), (7, nitrogen)]
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| v < 0.0));
        if let Some((col, v)) = negative {
            check.reject(line, col, format!("must be non-negative, got {}", v.unwrap_or_default()));
            continue;
        }
        let Some(plot) = check.plot(project, line, rec, 0) else { continue };
        out.push(FruitSample {
            plot_id: plot,
            treatment,
            date,
            berry_weight: bw,
            sugar,
            acidity,
            anthocyanins: antho,
            assimilable_nitrogen: nitrogen,
        });
    }
    let rejected = finish(shown, check)?;
    Ok((out, rejected))
}
