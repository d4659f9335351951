//! Derived meteorology: vapour-pressure deficit, FAO-56 reference
//! evapotranspiration (hourly Penman-Monteith), daily summaries by trapeze
//! integration and thermal time.
//!
//! Conventions used throughout this module:
//!
//! * an hourly record's `timestamp` is the *start* of its one-hour period,
//!   so the period midpoint used for solar geometry is `hour + 0.5`;
//! * longitudes are degrees east of Greenwich (negative west);
//! * wind speed is read in km/h at `SiteConfig::anemometer_height_m` and
//!   converted to m/s at 2 m.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Solar constant, MJ m-2 min-1.
const SOLAR_CONSTANT: f64 = 0.0820;
/// Stefan-Boltzmann constant scaled to one hour, MJ K-4 m-2 h-1.
const STEFAN_BOLTZMANN_HOURLY: f64 = 4.903e-9 / 24.0;
/// Fixed reference-grass albedo.
pub const ALBEDO: f64 = 0.23;
/// W m-2 sustained for one hour, expressed in MJ m-2.
const W_TO_MJ_PER_HOUR: f64 = 0.0036;
/// Latent heat conversion used in the FAO-56 numerator, (MJ m-2)-1 mm.
const INV_LAMBDA: f64 = 0.408;
/// Hourly aerodynamic coefficient numerator (37 / (T + 273)).
const HOURLY_AERO_COEF: f64 = 37.0;
/// Solar elevation (rad) below which Rs/Rso is considered meaningless.
const LOW_SUN_ANGLE: f64 = 0.3;
/// Base temperature for growing degree days, °C.
pub const GDD_BASE_TEMP: f64 = 10.0;
/// Longest interval between two hourly samples that is still bridged by
/// linear interpolation inside a day.
pub const MAX_HOURLY_GAP_H: i64 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MeteoError {
    #[error("relative humidity {0} % outside [0, 100]")]
    Humidity(f64),
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("site configuration: {0}")]
    Config(String),
    #[error("timestamps not strictly increasing at {0}")]
    Order(NaiveDateTime),
    #[error("thermal time origin {origin} not covered; missing dates: {missing:?}")]
    MissingDates { origin: NaiveDate, missing: Vec<NaiveDate> },
    #[error("no daily records")]
    Empty,
}

/// One hour of station data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyMeteoRecord {
    pub timestamp: NaiveDateTime,
    /// °C
    pub temp_air: f64,
    /// %
    pub rel_humidity: f64,
    /// km/h
    pub wind_speed: f64,
    /// W m-2
    pub solar_radiation: f64,
    /// mm
    pub precipitation: f64,
}

impl HourlyMeteoRecord {
    pub fn validate(&self) -> Result<(), MeteoError> {
        for (name, v) in [
            ("temp_air", self.temp_air),
            ("rel_humidity", self.rel_humidity),
            ("wind_speed", self.wind_speed),
            ("solar_radiation", self.solar_radiation),
            ("precipitation", self.precipitation),
        ] {
            if !v.is_finite() {
                return Err(MeteoError::NonFinite(name));
            }
        }
        if !(0.0..=100.0).contains(&self.rel_humidity) {
            return Err(MeteoError::Humidity(self.rel_humidity));
        }
        for (field, value) in [
            ("wind_speed", self.wind_speed),
            ("solar_radiation", self.solar_radiation),
            ("precipitation", self.precipitation),
        ] {
            if value < 0.0 {
                return Err(MeteoError::Negative { field, value });
            }
        }
        Ok(())
    }
}

/// Daily summary derived from hourly records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyMeteoRecord {
    pub date: NaiveDate,
    pub t_mean: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// mm/day
    pub et_ref: f64,
    /// kPa
    pub vpd_max: f64,
    /// °C·day since the thermal-time origin
    pub gdd_cum: f64,
    /// Trapeze mean of hourly VPD. Not part of the persisted daily schema.
    #[serde(skip)]
    pub vpd_mean: Option<f64>,
}

/// Site parameters needed by the hourly Penman-Monteith equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub latitude_deg: Option<f64>,
    /// Degrees east.
    pub longitude_deg: Option<f64>,
    pub elevation_m: Option<f64>,
    /// Longitude (degrees east) of the centre of the local standard time zone.
    #[serde(default = "default_tz_meridian")]
    pub tz_meridian_deg: f64,
    #[serde(default = "default_anemometer_height")]
    pub anemometer_height_m: f64,
    /// Rs/Rso assumed when the sun is too low for a measured ratio.
    #[serde(default = "default_night_ratio")]
    pub night_rs_rso: f64,
}

fn default_tz_meridian() -> f64 {
    15.0
}
fn default_anemometer_height() -> f64 {
    2.0
}
fn default_night_ratio() -> f64 {
    0.8
}

impl SiteConfig {
    pub fn new(latitude_deg: f64, longitude_deg: f64, elevation_m: f64) -> Self {
        SiteConfig {
            latitude_deg: Some(latitude_deg),
            longitude_deg: Some(longitude_deg),
            elevation_m: Some(elevation_m),
            tz_meridian_deg: default_tz_meridian(),
            anemometer_height_m: default_anemometer_height(),
            night_rs_rso: default_night_ratio(),
        }
    }

    fn resolved(&self) -> Result<ResolvedSite, MeteoError> {
        let lat = self
            .latitude_deg
            .ok_or_else(|| MeteoError::Config("latitude missing".into()))?;
        let lon = self
            .longitude_deg
            .ok_or_else(|| MeteoError::Config("longitude missing".into()))?;
        let z = self
            .elevation_m
            .ok_or_else(|| MeteoError::Config("elevation missing".into()))?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(MeteoError::Config(format!("latitude {lat} out of range")));
        }
        if self.anemometer_height_m <= 0.0 {
            return Err(MeteoError::Config("anemometer height must be positive".into()));
        }
        Ok(ResolvedSite {
            lat_rad: lat.to_radians(),
            lon_deg: lon,
            elevation_m: z,
            tz_meridian_deg: self.tz_meridian_deg,
            anemometer_height_m: self.anemometer_height_m,
            night_rs_rso: self.night_rs_rso,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ResolvedSite {
    lat_rad: f64,
    lon_deg: f64,
    elevation_m: f64,
    tz_meridian_deg: f64,
    anemometer_height_m: f64,
    night_rs_rso: f64,
}

/// Saturation vapour pressure, kPa.
pub fn saturation_vapor_pressure(temp_c: f64) -> f64 {
    0.6108 * (17.27 * temp_c / (temp_c + 237.3)).exp()
}

/// Slope of the saturation curve, kPa °C-1.
pub fn saturation_slope(temp_c: f64) -> f64 {
    4098.0 * saturation_vapor_pressure(temp_c) / (temp_c + 237.3).powi(2)
}

/// Atmospheric pressure from elevation, kPa.
pub fn atmospheric_pressure(elevation_m: f64) -> f64 {
    101.3 * ((293.0 - 0.0065 * elevation_m) / 293.0).powf(5.26)
}

/// Psychrometric constant, kPa °C-1.
pub fn psychrometric_constant(pressure_kpa: f64) -> f64 {
    0.665e-3 * pressure_kpa
}

/// Wind speed at 2 m from a reading at `height_m` (logarithmic profile).
pub fn wind_at_2m(speed_ms: f64, height_m: f64) -> f64 {
    if (height_m - 2.0).abs() < 1e-12 {
        speed_ms
    } else {
        speed_ms * 4.87 / (67.8 * height_m - 5.42).ln()
    }
}

/// Vapour-pressure deficit, kPa.
pub fn compute_vpd(record: &HourlyMeteoRecord) -> Result<f64, MeteoError> {
    vpd(record.temp_air, record.rel_humidity)
}

pub fn vpd(temp_c: f64, rel_humidity: f64) -> Result<f64, MeteoError> {
    if !(0.0..=100.0).contains(&rel_humidity) {
        return Err(MeteoError::Humidity(rel_humidity));
    }
    Ok((saturation_vapor_pressure(temp_c) * (1.0 - rel_humidity / 100.0)).max(0.0))
}

/// Solar geometry for one hourly period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlySun {
    /// Extraterrestrial radiation, MJ m-2 h-1.
    pub ra: f64,
    /// Sine of the solar elevation at the period midpoint.
    pub sin_elevation: f64,
}

/// Extraterrestrial radiation for the hour starting at `hour_start`
/// (decimal standard clock hours) on day-of-year `doy`.
pub fn hourly_extraterrestrial(
    lat_rad: f64,
    lon_deg: f64,
    tz_meridian_deg: f64,
    doy: u32,
    hour_start: f64,
) -> HourlySun {
    let j = doy as f64;
    let dr = 1.0 + 0.033 * (2.0 * PI * j / 365.0).cos();
    let decl = 0.409 * (2.0 * PI * j / 365.0 - 1.39).sin();
    let b = 2.0 * PI * (j - 81.0) / 364.0;
    let season_corr = 0.1645 * (2.0 * b).sin() - 0.1255 * b.cos() - 0.025 * b.sin();
    // FAO-56 writes (Lz - Lm) with degrees west; with east-positive values this is Lm - Lz.
    let midpoint = hour_start + 0.5;
    let omega = PI / 12.0 * ((midpoint + 0.06667 * (lon_deg - tz_meridian_deg) + season_corr) - 12.0);
    let omega_s = (-lat_rad.tan() * decl.tan()).clamp(-1.0, 1.0).acos();
    let mut w1 = (omega - PI / 24.0).max(-omega_s);
    let w2 = (omega + PI / 24.0).min(omega_s);
    if w1 > w2 {
        w1 = w2;
    }
    let ra = 12.0 * 60.0 / PI
        * SOLAR_CONSTANT
        * dr
        * ((w2 - w1) * lat_rad.sin() * decl.sin() + lat_rad.cos() * decl.cos() * (w2.sin() - w1.sin()));
    let sin_elevation = lat_rad.sin() * decl.sin() + lat_rad.cos() * decl.cos() * omega.cos();
    HourlySun {
        ra: ra.max(0.0),
        sin_elevation,
    }
}

/// Terms of the Penman-Monteith combination equation for one period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenmanTerms {
    /// kPa °C-1
    pub delta: f64,
    /// kPa °C-1
    pub gamma: f64,
    /// Net radiation, MJ m-2 per period.
    pub net_radiation: f64,
    /// Soil heat flux, MJ m-2 per period.
    pub soil_heat: f64,
    /// Air temperature, °C.
    pub temp_c: f64,
    /// m/s at 2 m.
    pub wind_2m: f64,
    pub es: f64,
    pub ea: f64,
}

/// Raw hourly FAO-56 Penman-Monteith value, mm/h. May be negative.
pub fn penman_monteith_hourly(t: &PenmanTerms) -> f64 {
    let radiative = INV_LAMBDA * t.delta * (t.net_radiation - t.soil_heat);
    let aero = t.gamma * (HOURLY_AERO_COEF / (t.temp_c + 273.0)) * t.wind_2m * (t.es - t.ea);
    (radiative + aero) / (t.delta + t.gamma * (1.0 + 0.34 * t.wind_2m))
}

/// Intermediate quantities of the hourly computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourlyEtBreakdown {
    pub ra: f64,
    pub rso: f64,
    pub rs: f64,
    pub net_radiation: f64,
    pub soil_heat: f64,
    pub raw: f64,
    /// Clamped at zero.
    pub et_ref: f64,
}

pub fn etref_hourly_breakdown(
    record: &HourlyMeteoRecord,
    site: &SiteConfig,
) -> Result<HourlyEtBreakdown, MeteoError> {
    record.validate()?;
    let site = site.resolved()?;
    let temp = record.temp_air;
    let es = saturation_vapor_pressure(temp);
    let ea = es * record.rel_humidity / 100.0;
    let gamma = psychrometric_constant(atmospheric_pressure(site.elevation_m));
    let wind_2m = wind_at_2m(record.wind_speed / 3.6, site.anemometer_height_m);

    let ts = record.timestamp;
    let hour_start = ts.hour() as f64 + ts.minute() as f64 / 60.0;
    let sun = hourly_extraterrestrial(
        site.lat_rad,
        site.lon_deg,
        site.tz_meridian_deg,
        ts.ordinal(),
        hour_start,
    );
    let rso = (0.75 + 2e-5 * site.elevation_m) * sun.ra;
    let rs = record.solar_radiation * W_TO_MJ_PER_HOUR;
    let rs_rso = if sun.sin_elevation > LOW_SUN_ANGLE.sin() && rso > 0.0 {
        (rs / rso).clamp(0.3, 1.0)
    } else {
        site.night_rs_rso
    };
    let rns = (1.0 - ALBEDO) * rs;
    let rnl = STEFAN_BOLTZMANN_HOURLY
        * (temp + 273.16).powi(4)
        * (0.34 - 0.14 * ea.sqrt())
        * (1.35 * rs_rso - 0.35);
    let rn = rns - rnl;
    let soil_heat = if sun.ra > 0.0 { 0.1 * rn } else { 0.5 * rn };
    let raw = penman_monteith_hourly(&PenmanTerms {
        delta: saturation_slope(temp),
        gamma,
        net_radiation: rn,
        soil_heat,
        temp_c: temp,
        wind_2m,
        es,
        ea,
    });
    Ok(HourlyEtBreakdown {
        ra: sun.ra,
        rso,
        rs,
        net_radiation: rn,
        soil_heat,
        raw,
        et_ref: raw.max(0.0),
    })
}

/// Hourly reference evapotranspiration, mm/h, clamped at zero.
pub fn compute_etref_hourly(record: &HourlyMeteoRecord, site: &SiteConfig) -> Result<f64, MeteoError> {
    etref_hourly_breakdown(record, site).map(|b| b.et_ref)
}

/// Why a day was left out of the daily series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncompleteDay {
    pub date: NaiveDate,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct DailySeries {
    pub days: Vec<DailyMeteoRecord>,
    pub incomplete: Vec<IncompleteDay>,
}

/// Trapezoidal integral of `(x, y)` samples (x strictly increasing).
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Trapezoidal mean over the sampled span.
fn trapezoid_mean(xs: &[f64], ys: &[f64]) -> f64 {
    let span = xs[xs.len() - 1] - xs[0];
    trapezoid(xs, ys) / span
}

/// Aggregate hourly records into one record per complete calendar day.
///
/// Daily means are trapeze means over the sampled polyline, which bridges
/// gaps of up to [`MAX_HOURLY_GAP_H`] hours by linear interpolation; ETref
/// is the trapeze mean hourly rate times 24 h. Days with fewer than two
/// records or a longer gap (including before the first / after the last
/// sample) are reported as incomplete. `gdd_cum` is left at zero; see
/// [`thermal_time`].
pub fn daily_from_hourly(
    series: &[HourlyMeteoRecord],
    site: &SiteConfig,
) -> Result<DailySeries, MeteoError> {
    for w in series.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(MeteoError::Order(w[1].timestamp));
        }
    }
    let mut by_day: BTreeMap<NaiveDate, Vec<&HourlyMeteoRecord>> = BTreeMap::new();
    for r in series {
        by_day.entry(r.timestamp.date()).or_default().push(r);
    }
    let mut out = DailySeries::default();
    for (date, recs) in by_day {
        if recs.len() < 2 {
            log::warn!("{date}: only {} hourly record(s), day excluded", recs.len());
            out.incomplete.push(IncompleteDay {
                date,
                reason: format!("{} record(s), need at least 2", recs.len()),
            });
            continue;
        }
        let hours: Vec<f64> = recs
            .iter()
            .map(|r| r.timestamp.hour() as f64 + r.timestamp.minute() as f64 / 60.0)
            .collect();
        let first_gap = hours[0];
        let last_gap = 23.0 - hours[hours.len() - 1];
        let max_inner = hours.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let limit = MAX_HOURLY_GAP_H as f64;
        if first_gap > limit || last_gap > limit || max_inner > limit + 1.0 {
            log::warn!("{date}: hourly gap longer than {MAX_HOURLY_GAP_H} h, day excluded");
            out.incomplete.push(IncompleteDay {
                date,
                reason: format!("gap longer than {MAX_HOURLY_GAP_H} h"),
            });
            continue;
        }
        let temps: Vec<f64> = recs.iter().map(|r| r.temp_air).collect();
        let mut vpds = Vec::with_capacity(recs.len());
        let mut ets = Vec::with_capacity(recs.len());
        for r in &recs {
            vpds.push(compute_vpd(r)?);
            ets.push(compute_etref_hourly(r, site)?);
        }
        let t_mean = trapezoid_mean(&hours, &temps);
        out.days.push(DailyMeteoRecord {
            date,
            t_mean,
            t_min: temps.iter().copied().fold(f64::INFINITY, f64::min),
            t_max: temps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            et_ref: trapezoid_mean(&hours, &ets) * 24.0,
            vpd_max: vpds.iter().copied().fold(0.0, f64::max),
            gdd_cum: 0.0,
            vpd_mean: Some(trapezoid_mean(&hours, &vpds)),
        });
    }
    Ok(out)
}

/// April 1st of the given year, the default thermal-time origin.
pub fn default_gdd_origin(year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, 4, 1).expect("April 1st exists")
}

/// Cumulative growing degree days for each daily record (base 10 °C,
/// negative contributions clamped). Days before `origin` get zero.
pub fn thermal_time(dailies: &[DailyMeteoRecord], origin: NaiveDate) -> Result<Vec<f64>, MeteoError> {
    let first = dailies.first().ok_or(MeteoError::Empty)?.date;
    let last = dailies[dailies.len() - 1].date;
    let mut missing = Vec::new();
    if first > origin {
        missing.extend(origin.iter_days().take_while(|d| *d < first));
    }
    for w in dailies.windows(2) {
        let (a, b) = (w[0].date, w[1].date);
        if b <= a {
            return Err(MeteoError::Config(format!("daily dates not increasing at {b}")));
        }
        missing.extend(a.iter_days().skip(1).take_while(|d| *d < b).filter(|d| *d >= origin));
    }
    if origin > last {
        missing.push(origin);
    }
    if !missing.is_empty() {
        return Err(MeteoError::MissingDates { origin, missing });
    }
    let mut acc = 0.0;
    Ok(dailies
        .iter()
        .map(|d| {
            if d.date >= origin {
                acc += (d.t_mean - GDD_BASE_TEMP).max(0.0);
            }
            acc
        })
        .collect())
}

/// Fill `gdd_cum` in place.
pub fn assign_thermal_time(dailies: &mut [DailyMeteoRecord], origin: NaiveDate) -> Result<(), MeteoError> {
    let gdd = thermal_time(dailies, origin)?;
    for (d, g) in dailies.iter_mut().zip(gdd) {
        d.gdd_cum = g;
    }
    Ok(())
}
