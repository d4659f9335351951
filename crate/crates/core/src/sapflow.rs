//! Sap-flow sensor quality control and daily transpiration.

use std::collections::BTreeMap;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Treatment;

/// Grams of water in one millimetre over one square metre.
const GRAMS_PER_MM_M2: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SapflowError {
    #[error("sensor {0}: empty stream")]
    EmptyStream(String),
    #[error("sensor {0}: timestamps not strictly increasing at {1}")]
    Order(String, NaiveDateTime),
    #[error("ground area per vine must be positive, got {0}")]
    Area(f64),
    #[error("no reliable sensor for plot {plot} treatment {treatment}")]
    NoReliableSensor { plot: String, treatment: Treatment },
    #[error("streams mix plot-treatments: {0}")]
    MixedStreams(String),
    #[error("smoothing window must be odd and >= 3, got {0}")]
    Window(usize),
    #[error("series of {len} days is shorter than the {window}-day window")]
    TooShort { len: usize, window: usize },
    #[error("no observation within the smoothing window around {0}")]
    UnfillableGap(NaiveDate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QcFlag {
    Ok,
    Nighttime,
    Weak,
    Erroneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SapRecord {
    pub timestamp: NaiveDateTime,
    /// g/h; `None` when the logger reported nothing.
    pub rate_g_per_h: Option<f64>,
    pub flag: QcFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorStream {
    pub sensor_id: String,
    pub plot_id: String,
    pub treatment: Treatment,
    /// Leaf-area scaling applied to every rate of this sensor.
    pub leaf_area_coef: f64,
    pub records: Vec<SapRecord>,
}

impl SensorStream {
    pub fn new(sensor_id: impl Into<String>, plot_id: impl Into<String>, treatment: Treatment) -> Self {
        SensorStream {
            sensor_id: sensor_id.into(),
            plot_id: plot_id.into(),
            treatment,
            leaf_area_coef: 1.0,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, timestamp: NaiveDateTime, rate: Option<f64>) {
        self.records.push(SapRecord {
            timestamp,
            rate_g_per_h: rate,
            flag: QcFlag::Ok,
        });
    }
}

/// Thresholds for the expert filters. All of them are configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcRuleset {
    /// Hours with solar radiation below this (W m-2) are night.
    pub night_radiation_wm2: f64,
    /// Clock window used when no radiation reading exists: day is
    /// `[day_start_hour, day_end_hour)`.
    pub day_start_hour: u32,
    pub day_end_hour: u32,
    /// Daytime rates below this (g/h) are weak.
    pub weak_rate_g_per_h: f64,
    /// Rates above this (g/h) are erroneous.
    pub erroneous_ceiling_g_per_h: f64,
    /// A sensor is reliable when strictly less than this fraction of its
    /// daytime records are filtered.
    pub max_filtered_fraction: f64,
}

impl Default for QcRuleset {
    fn default() -> Self {
        QcRuleset {
            night_radiation_wm2: 10.0,
            day_start_hour: 6,
            day_end_hour: 20,
            weak_rate_g_per_h: 1.0,
            erroneous_ceiling_g_per_h: 5000.0,
            max_filtered_fraction: 0.05,
        }
    }
}

impl QcRuleset {
    fn is_night(&self, ts: NaiveDateTime, radiation: Option<f64>) -> bool {
        match radiation {
            Some(rs) => rs < self.night_radiation_wm2,
            None => !(self.day_start_hour..self.day_end_hour).contains(&ts.hour()),
        }
    }

    fn classify(&self, ts: NaiveDateTime, rate: Option<f64>, radiation: Option<f64>) -> QcFlag {
        if self.is_night(ts, radiation) {
            return QcFlag::Nighttime;
        }
        match rate {
            None => QcFlag::Erroneous,
            Some(r) if !r.is_finite() || r < 0.0 || r > self.erroneous_ceiling_g_per_h => QcFlag::Erroneous,
            Some(r) if r < self.weak_rate_g_per_h => QcFlag::Weak,
            Some(_) => QcFlag::Ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcOutcome {
    pub stream: SensorStream,
    pub reliable: bool,
    pub daytime_records: usize,
    pub filtered_records: usize,
}

impl QcOutcome {
    pub fn filtered_fraction(&self) -> f64 {
        if self.daytime_records == 0 {
            1.0
        } else {
            self.filtered_records as f64 / self.daytime_records as f64
        }
    }
}

/// Flag every record of a stream and decide whether the sensor is reliable.
///
/// `radiation` maps hourly timestamps to measured solar radiation; hours
/// missing from it fall back to the ruleset's clock window. Only daytime
/// records count toward the reliability fraction.
pub fn qc_sensor(
    stream: &SensorStream,
    rules: &QcRuleset,
    radiation: &BTreeMap<NaiveDateTime, f64>,
) -> Result<QcOutcome, SapflowError> {
    if stream.records.is_empty() {
        return Err(SapflowError::EmptyStream(stream.sensor_id.clone()));
    }
    for w in stream.records.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(SapflowError::Order(stream.sensor_id.clone(), w[1].timestamp));
        }
    }
    let mut out = stream.clone();
    let (mut daytime, mut filtered) = (0usize, 0usize);
    for rec in &mut out.records {
        rec.flag = rules.classify(rec.timestamp, rec.rate_g_per_h, radiation.get(&rec.timestamp).copied());
        match rec.flag {
            QcFlag::Nighttime => {}
            QcFlag::Ok => daytime += 1,
            QcFlag::Weak | QcFlag::Erroneous => {
                daytime += 1;
                filtered += 1;
            }
        }
    }
    let reliable = daytime > 0 && (filtered as f64) < rules.max_filtered_fraction * daytime as f64;
    Ok(QcOutcome {
        stream: out,
        reliable,
        daytime_records: daytime,
        filtered_records: filtered,
    })
}

/// Convert a per-vine flux (g/h) into a water depth over the vine's ground area (mm/h).
pub fn scale_to_mm(rate_g_per_h: f64, ground_area_m2: f64) -> Result<f64, SapflowError> {
    if !(ground_area_m2 > 0.0) {
        return Err(SapflowError::Area(ground_area_m2));
    }
    Ok(rate_g_per_h / (GRAMS_PER_MM_M2 * ground_area_m2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyTranspiration {
    pub date: NaiveDate,
    /// mm/day
    pub t_mm: Option<f64>,
}

/// Daily vine transpiration `T(t)` of one plot-treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranspirationSeries {
    pub plot_id: String,
    pub treatment: Treatment,
    pub daily: Vec<DailyTranspiration>,
    pub smoothed: bool,
}

impl TranspirationSeries {
    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.daily
            .binary_search_by_key(&date, |d| d.date)
            .ok()
            .and_then(|i| self.daily[i].t_mm)
    }
}

/// Mean over reliable sensors of each sensor's daily sum of ok-flagged
/// hourly rates, scaled to mm/day. Days where no reliable sensor has an ok
/// record are missing.
pub fn daily_transpiration(outcomes: &[QcOutcome], ground_area_m2: f64) -> Result<TranspirationSeries, SapflowError> {
    if !(ground_area_m2 > 0.0) {
        return Err(SapflowError::Area(ground_area_m2));
    }
    let first = outcomes
        .first()
        .ok_or_else(|| SapflowError::MixedStreams("no streams".into()))?;
    let (plot, treatment) = (first.stream.plot_id.clone(), first.stream.treatment);
    if let Some(o) = outcomes
        .iter()
        .find(|o| o.stream.plot_id != plot || o.stream.treatment != treatment)
    {
        return Err(SapflowError::MixedStreams(format!(
            "{} is {}/{}, expected {plot}/{treatment}",
            o.stream.sensor_id, o.stream.plot_id, o.stream.treatment
        )));
    }
    let reliable: Vec<&QcOutcome> = outcomes.iter().filter(|o| o.reliable).collect();
    if reliable.is_empty() {
        return Err(SapflowError::NoReliableSensor { plot, treatment });
    }

    // date -> per-sensor daily sums, in sensor order
    let mut sums: BTreeMap<NaiveDate, Vec<f64>> = BTreeMap::new();
    let mut span: Option<(NaiveDate, NaiveDate)> = None;
    for o in &reliable {
        let mut per_day: BTreeMap<NaiveDate, f64> = BTreeMap::new();
        for r in &o.stream.records {
            let d = r.timestamp.date();
            span = Some(match span {
                None => (d, d),
                Some((a, b)) => (a.min(d), b.max(d)),
            });
            if r.flag == QcFlag::Ok {
                let rate = r.rate_g_per_h.unwrap_or(0.0) * o.stream.leaf_area_coef;
                *per_day.entry(d).or_insert(0.0) += rate;
            }
        }
        for (d, grams) in per_day {
            sums.entry(d).or_default().push(grams);
        }
    }
    let (start, end) = span.expect("reliable streams are non-empty");
    let daily = start
        .iter_days()
        .take_while(|d| *d <= end)
        .map(|date| {
            let t_mm = sums.get(&date).map(|v| {
                let mut sorted = v.clone();
                // fixed summation order keeps the mean independent of sensor order
                sorted.sort_by(f64::total_cmp);
                sorted.iter().sum::<f64>() / sorted.len() as f64 / (GRAMS_PER_MM_M2 * ground_area_m2)
            });
            DailyTranspiration { date, t_mm }
        })
        .collect();
    Ok(TranspirationSeries {
        plot_id: plot,
        treatment,
        daily,
        smoothed: false,
    })
}

/// Centred moving average that skips missing values.
///
/// The window shrinks symmetrically near the ends so the first and last
/// days pass through unchanged. Leading and trailing days that stay missing
/// are trimmed; a missing day that no window can fill is an error.
pub fn smooth_ma(series: &TranspirationSeries, window: usize) -> Result<TranspirationSeries, SapflowError> {
    if window < 3 || window % 2 == 0 {
        return Err(SapflowError::Window(window));
    }
    let n = series.daily.len();
    if n < window {
        return Err(SapflowError::TooShort { len: n, window });
    }
    let values: Vec<Option<f64>> = series.daily.iter().map(|d| d.t_mm).collect();
    let smoothed = centered_mean(&values, window);
    let first = smoothed.iter().position(Option::is_some);
    let last = smoothed.iter().rposition(Option::is_some);
    let (Some(first), Some(last)) = (first, last) else {
        return Err(SapflowError::UnfillableGap(series.daily[0].date));
    };
    let mut daily = Vec::with_capacity(last - first + 1);
    for i in first..=last {
        let t_mm = smoothed[i];
        if t_mm.is_none() {
            return Err(SapflowError::UnfillableGap(series.daily[i].date));
        }
        daily.push(DailyTranspiration {
            date: series.daily[i].date,
            t_mm,
        });
    }
    Ok(TranspirationSeries {
        plot_id: series.plot_id.clone(),
        treatment: series.treatment,
        daily,
        smoothed: true,
    })
}

/// Centred mean with symmetric edge shrinking, skipping `None`.
pub fn centered_mean(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    let n = values.len();
    let half = window / 2;
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let present: Vec<f64> = values[i - h..=i + h].iter().flatten().copied().collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect()
}
