//! Scalar stress summaries and maturity dating.
//!
//! The Ks course is integrated by trapezes against cumulative thermal time
//! over four phenological windows: nouaison to harvest, nouaison to veraison,
//! veraison to harvest, veraison to maturity. Lower values mean more stress.

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::kstar::KsSeries;
use crate::phenology::{PhenologyCalendar, Stage};
use crate::Treatment;

/// Longest run of missing Ks days bridged by linear interpolation.
pub const MAX_KS_GAP_DAYS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("empty or reversed window [{start}, {end}]")]
    Window { start: f64, end: f64 },
    #[error("window [{start}, {end}] GDD not covered by Ks series [{first}, {last}]")]
    Uncovered { start: f64, end: f64, first: f64, last: f64 },
    #[error("{days} consecutive missing Ks days from {from} exceed the {max}-day gap limit")]
    Gap { from: NaiveDate, days: usize, max: usize },
    #[error("phenology calendar lacks a thermal time for {0}")]
    MissingStage(Stage),
    #[error("need at least two usable fruit samples, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FruitSample {
    pub plot_id: String,
    pub treatment: Treatment,
    pub date: NaiveDate,
    /// g
    pub berry_weight: f64,
    /// g/L
    pub sugar: f64,
    /// gH2SO4/L
    pub acidity: f64,
    /// mg/L
    #[serde(default)]
    pub anthocyanins: Option<f64>,
    /// mg/L
    #[serde(default)]
    pub assimilable_nitrogen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub plot_id: String,
    pub treatment: Treatment,
    pub nou_harv: f64,
    pub nou_ver: f64,
    pub ver_harv: f64,
    /// Absent when maturity was never reached.
    pub ver_mat: Option<f64>,
}

/// One line of the aggregate table, `NA` standing for an absent value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub site: String,
    pub variety: String,
    pub treatment: Treatment,
    pub nou_harv: f64,
    pub nou_ver: f64,
    pub ver_harv: f64,
    #[serde(serialize_with = "na::serialize", deserialize_with = "na::deserialize")]
    pub ver_mat: Option<f64>,
}

impl AggregateRow {
    pub fn from_record(rec: &AggregateRecord, site: &str, variety: &str) -> Self {
        AggregateRow {
            site: site.to_string(),
            variety: variety.to_string(),
            treatment: rec.treatment,
            nou_harv: rec.nou_harv,
            nou_ver: rec.nou_ver,
            ver_harv: rec.ver_harv,
            ver_mat: rec.ver_mat,
        }
    }
}

mod na {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NA"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let raw = String::deserialize(d)?;
        match raw.trim() {
            "NA" | "" => Ok(None),
            t => t.parse().map(Some).map_err(serde::de::Error::custom),
        }
    }
}

/// Trapezoidal integral of Ks against thermal time over `[start, end]`.
///
/// Missing Ks values are interpolated linearly when the run of missing days
/// is at most [`MAX_KS_GAP_DAYS`] long.
pub fn trapz_ks(ks: &KsSeries, start: f64, end: f64) -> Result<f64, AggregateError> {
    if !(start < end) {
        return Err(AggregateError::Window { start, end });
    }
    let pts = &ks.points;
    // runs of missing values touching the window
    let mut i = 0;
    while i < pts.len() {
        if pts[i].ks.is_some() {
            i += 1;
            continue;
        }
        let from = i;
        while i < pts.len() && pts[i].ks.is_none() {
            i += 1;
        }
        let lo = if from > 0 { pts[from - 1].gdd_cum } else { f64::NEG_INFINITY };
        let hi = if i < pts.len() { pts[i].gdd_cum } else { f64::INFINITY };
        let days = i - from;
        if days > MAX_KS_GAP_DAYS && lo < end && hi > start {
            return Err(AggregateError::Gap {
                from: pts[from].date,
                days,
                max: MAX_KS_GAP_DAYS,
            });
        }
    }
    let valid: Vec<(f64, f64)> = pts.iter().filter_map(|p| p.ks.map(|k| (p.gdd_cum, k))).collect();
    let (first, last) = match (valid.first(), valid.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => (f64::NAN, f64::NAN),
    };
    if !(first <= start && last >= end) {
        return Err(AggregateError::Uncovered { start, end, first, last });
    }
    let interp = |a: (f64, f64), b: (f64, f64), x: f64| {
        if b.0 == a.0 {
            a.1
        } else {
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        }
    };
    let mut total = 0.0;
    for w in valid.windows(2) {
        let (a, b) = (w[0], w[1]);
        let lo = a.0.max(start);
        let hi = b.0.min(end);
        if hi <= lo {
            continue;
        }
        let ylo = interp(a, b, lo);
        let yhi = interp(a, b, hi);
        total += 0.5 * (ylo + yhi) * (hi - lo);
    }
    Ok(total)
}

/// First date the sugar/acidity ratio reaches `threshold`, interpolated
/// linearly between sampling dates and rounded to the nearest day.
/// `Ok(None)` when the threshold is never reached.
pub fn maturity_date(samples: &[FruitSample], threshold: f64) -> Result<Option<NaiveDate>, AggregateError> {
    let mut usable: Vec<(NaiveDate, f64)> = samples
        .iter()
        .filter_map(|s| {
            if s.acidity > 0.0 {
                Some((s.date, s.sugar / s.acidity))
            } else {
                log::warn!("fruit sample of {} on {} skipped: zero acidity", s.plot_id, s.date);
                None
            }
        })
        .collect();
    if usable.len() < 2 {
        return Err(AggregateError::TooFewSamples(usable.len()));
    }
    usable.sort_by_key(|s| s.0);
    if usable[0].1 >= threshold {
        return Ok(Some(usable[0].0));
    }
    for w in usable.windows(2) {
        let ((d0, r0), (d1, r1)) = (w[0], w[1]);
        if r1 >= threshold {
            let span = (d1 - d0).num_days() as f64;
            let offset = ((threshold - r0) / (r1 - r0) * span).round() as u64;
            return Ok(Some(d0 + Days::new(offset)));
        }
    }
    Ok(None)
}

fn stage_gdd(calendar: &PhenologyCalendar, stage: Stage) -> Result<f64, AggregateError> {
    calendar.gdd(stage).ok_or(AggregateError::MissingStage(stage))
}

/// The four window integrals. Maturity may be absent.
pub fn build_aggregates(ks: &KsSeries, calendar: &PhenologyCalendar) -> Result<AggregateRecord, AggregateError> {
    let nou = stage_gdd(calendar, Stage::Nouaison)?;
    let ver = stage_gdd(calendar, Stage::Veraison)?;
    let harv = stage_gdd(calendar, Stage::Harvest)?;
    let ver_mat = match calendar.gdd(Stage::Maturity) {
        None => None,
        Some(m) if m == ver => Some(0.0),
        Some(m) => Some(trapz_ks(ks, ver, m)?),
    };
    Ok(AggregateRecord {
        plot_id: ks.plot_id.clone(),
        treatment: ks.treatment,
        nou_harv: trapz_ks(ks, nou, harv)?,
        nou_ver: trapz_ks(ks, nou, ver)?,
        ver_harv: trapz_ks(ks, ver, harv)?,
        ver_mat,
    })
}
