//! Three summer days of hourly weather with VPD and ETref computed by a
//! separate hand worksheet (Montpellier-like site, 50 m, anemometer at 2 m).

use std::time::{Duration, Instant};

use chrono::NaiveDateTime;
use serde::Deserialize;
use vinestress::meteo::{compute_etref_hourly, compute_vpd, HourlyMeteoRecord, SiteConfig};

pub const TABLE: &str = include_str!("../data/fao56_3day.csv");

#[derive(Debug, Deserialize)]
pub struct Row {
    pub timestamp: NaiveDateTime,
    pub temp_air: f64,
    pub rel_humidity: f64,
    pub wind_speed: f64,
    pub solar_radiation: f64,
    pub precipitation: f64,
    pub vpd_kpa: f64,
    pub et_ref_mm: f64,
}

impl Row {
    pub fn record(&self) -> HourlyMeteoRecord {
        HourlyMeteoRecord {
            timestamp: self.timestamp,
            temp_air: self.temp_air,
            rel_humidity: self.rel_humidity,
            wind_speed: self.wind_speed,
            solar_radiation: self.solar_radiation,
            precipitation: self.precipitation,
        }
    }
}

pub fn site() -> SiteConfig {
    SiteConfig::new(43.6, 3.88, 50.0)
}

pub fn rows() -> Vec<Row> {
    csv::Reader::from_reader(TABLE.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("oracle table parses")
}

#[derive(Debug)]
pub struct Outcome {
    pub hours: usize,
    pub max_vpd_err: f64,
    pub max_et_err: f64,
    pub elapsed: Duration,
}

pub fn compare() -> Outcome {
    let start = Instant::now();
    let site = site();
    let rows = rows();
    let mut out = Outcome {
        hours: rows.len(),
        max_vpd_err: 0.0,
        max_et_err: 0.0,
        elapsed: Duration::ZERO,
    };
    for r in &rows {
        let rec = r.record();
        let vpd = compute_vpd(&rec).expect("valid hour");
        let et = compute_etref_hourly(&rec, &site).expect("valid hour");
        out.max_vpd_err = out.max_vpd_err.max((vpd - r.vpd_kpa).abs());
        out.max_et_err = out.max_et_err.max((et - r.et_ref_mm).abs());
    }
    out.elapsed = start.elapsed();
    out
}
