//! Synthetic two-site season used by the demo project and the end-to-end
//! tests. Every plot-treatment gets a T/ETref curve with a known plateau,
//! so the breakpoint the rules should find is known in advance.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vinestress::aggregate::FruitSample;
use vinestress::kstar::LwpRecord;
use vinestress::meteo::{daily_from_hourly, HourlyMeteoRecord, SiteConfig};
use vinestress::phenology::Stage;
use vinestress::Treatment;

use crate::error::PipelineError;
use crate::ingest::{self, Kind, PhenologyRow, SapRow};
use crate::store::{to_csv, Project};

pub const DEFAULT_SEED: u64 = 2012;
const YEAR: i32 = 2012;
const SITES: [(&str, f64, f64, f64, f64); 2] = [
    // name, latitude, longitude, elevation, temperature offset
    ("RIE", 43.62, 3.87, 50.0, 0.0),
    ("PIC", 43.76, 3.82, 120.0, -0.6),
];
const VARIETIES: [(&str, &str, f64); 4] = [
    // variety, plot code, berry weight offset (g)
    ("syrah", "SY", 0.0),
    ("grenache", "GR", 0.25),
    ("mourvedre", "MO", -0.1),
    ("carignan", "CA", 0.15),
];
const GROUND_AREA_M2: f64 = 2.5;
/// Leaf-area coefficient of every second sensor; the first uses 1.
const SECOND_SENSOR_COEF: f64 = 1.1;
const HOURLY_NOISE: f64 = 0.001;
const UNRELIABLE_SENSOR: &str = "RIE-GR-i1-b";
const UNRELIABLE_FRACTION: f64 = 0.08;
const NEVER_MATURE: (&str, Treatment) = ("PIC-MO", Treatment::I0);
const MATURITY_THRESHOLD: f64 = 27.0;
const RISE_DAYS: f64 = 50.0;
const BASE_RATIO: f64 = 0.08;
const SLOPE: f64 = 0.015;

/// Parameters of one plot-treatment's ratio curve. Day offsets are days
/// since January 1st (fractional).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotTruth {
    pub plot_id: String,
    pub site: String,
    pub variety: String,
    pub treatment: Treatment,
    pub budbreak: NaiveDate,
    pub bloom: NaiveDate,
    pub veraison: NaiveDate,
    pub harvest: NaiveDate,
    /// Centre of the plateau.
    pub plateau_day: f64,
    pub plateau_date: NaiveDate,
    pub plateau_ratio: f64,
    /// Curvature of the plateau, r = K - a (t - t0)^2.
    pub curvature: f64,
    pub floor: f64,
    pub first_lwp_stress: NaiveDate,
}

impl PlotTruth {
    fn day(&self, d: NaiveDate) -> f64 {
        d.ordinal0() as f64
    }

    /// Noise-free ratio at day `t`.
    pub fn ratio(&self, t: f64) -> f64 {
        let b = self.day(self.budbreak);
        let a = self.curvature;
        let half = SLOPE / (2.0 * a);
        let cap_start = self.plateau_day - half;
        let cap_end = self.plateau_day + half;
        let cap_edge = self.plateau_ratio - a * half * half;
        let decline_days = match self.treatment {
            Treatment::I0 => 8.0,
            Treatment::I1 => 4.0,
        };
        let r1 = cap_edge - SLOPE * decline_days;
        if t <= b {
            BASE_RATIO
        } else if t <= b + RISE_DAYS {
            let x = t - b;
            BASE_RATIO + SLOPE * x * x / (2.0 * RISE_DAYS)
        } else if t <= cap_start {
            BASE_RATIO + SLOPE * RISE_DAYS / 2.0 + SLOPE * (t - b - RISE_DAYS)
        } else if t <= cap_end {
            self.plateau_ratio - a * (t - self.plateau_day).powi(2)
        } else if t <= cap_end + decline_days {
            cap_edge - SLOPE * (t - cap_end)
        } else {
            let tau = (r1 - self.floor) / SLOPE;
            self.floor + (r1 - self.floor) * (-(t - cap_end - decline_days) / tau).exp()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub seed: u64,
    pub truths: Vec<PlotTruth>,
}

fn date(m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(YEAR, m, d).expect("valid date")
}

fn plus(d: NaiveDate, n: u64) -> NaiveDate {
    d + Days::new(n)
}

fn round(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

fn season_start() -> NaiveDateTime {
    date(4, 1).and_hms_opt(0, 0, 0).expect("valid time")
}

fn season_end() -> NaiveDate {
    date(10, 10)
}

/// Clear-sky radiation (W m-2) at the midpoint of an hour.
fn clear_sky(ts: NaiveDateTime, lat: f64, lon: f64) -> f64 {
    let doy = ts.ordinal() as f64;
    let decl = 0.409 * (2.0 * std::f64::consts::PI * doy / 365.0 - 1.39).sin();
    let solar_time = ts.hour() as f64 + 0.5 + (lon - 15.0) / 15.0;
    let omega = std::f64::consts::PI / 12.0 * (solar_time - 12.0);
    let phi = lat.to_radians();
    let sin_beta = phi.sin() * decl.sin() + phi.cos() * decl.cos() * omega.cos();
    (850.0 * sin_beta).max(0.0)
}

fn hourly_weather(lat: f64, lon: f64, t_offset: f64) -> Vec<HourlyMeteoRecord> {
    let mut out = Vec::new();
    let mut ts = season_start();
    let end = plus(season_end(), 1).and_hms_opt(0, 0, 0).expect("valid time");
    let heat = [date(7, 20), date(7, 21)];
    while ts < end {
        let doy = ts.ordinal() as f64;
        let t_mean = 17.5 + t_offset + 8.5 * (2.0 * std::f64::consts::PI * (doy - 110.0) / 365.0).sin();
        let phase = (2.0 * std::f64::consts::PI * (ts.hour() as f64 + 0.5 - 9.0) / 24.0).sin();
        let mut temp = t_mean + 6.0 * phase;
        let mut rh = 60.0 - 15.0 * phase;
        if heat.contains(&ts.date()) {
            temp += 7.0;
            rh = 25.0 - 5.0 * phase;
        }
        out.push(HourlyMeteoRecord {
            timestamp: ts,
            temp_air: round(temp, 2),
            rel_humidity: round(rh, 1),
            wind_speed: 8.0,
            solar_radiation: round(clear_sky(ts, lat, lon), 1),
            precipitation: 0.0,
        });
        ts += chrono::Duration::hours(1);
    }
    out
}

fn config_text(seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {seed}\n");
    for (name, lat, lon, elev, _) in SITES {
        let _ = writeln!(s, "[[sites]]\nname = \"{name}\"\nregion = \"languedoc\"");
        let _ = writeln!(s, "latitude = {lat}\nlongitude = {lon}\nelevation = {elev}\n");
    }
    for (site, ..) in SITES {
        for (variety, code, _) in VARIETIES {
            let _ = writeln!(
                s,
                "[[plots]]\nid = \"{site}-{code}\"\nsite = \"{site}\"\nvariety = \"{variety}\"\nground_area_m2 = {GROUND_AREA_M2}\n"
            );
        }
    }
    let _ = writeln!(s, "[leaf_area]");
    for (site, ..) in SITES {
        for (_, code, _) in VARIETIES {
            for t in ["i0", "i1"] {
                let _ = writeln!(s, "\"{site}-{code}-{t}-b\" = {SECOND_SENSOR_COEF}");
            }
        }
    }
    let _ = writeln!(s, "\n[maturity]\ndefault_threshold = {MATURITY_THRESHOLD}\n");
    let _ = writeln!(s, "[models]\nresponses = [\"berry_weight\", \"sugar\"]\npermutations = 100");
    s
}

/// Write the raw files under `dir/raw` and the project configuration.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<Fixture, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let raw = dir.join("raw");
    let put = |rel: &str, bytes: &[u8]| -> Result<(), PipelineError> {
        let p = raw.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(PipelineError::io(format!("creating {}", parent.display())))?;
        }
        std::fs::write(&p, bytes).map_err(PipelineError::io(format!("writing {}", p.display())))
    };

    let mut truths = Vec::new();
    let mut phenology = Vec::new();
    let mut lwp = Vec::new();
    let mut fruit = Vec::new();
    for (site, lat, lon, elev, t_offset) in SITES {
        let weather = hourly_weather(lat, lon, t_offset);
        put(&format!("meteo/{site}.csv"), &to_csv(&weather)?)?;
        let cfg = SiteConfig::new(lat, lon, elev);
        let dailies = daily_from_hourly(&weather, &cfg).map_err(|e| PipelineError::Internal(e.to_string()))?;
        if !dailies.incomplete.is_empty() {
            return Err(PipelineError::Internal("fixture weather has incomplete days".into()));
        }
        let et: std::collections::BTreeMap<NaiveDate, f64> = dailies.days.iter().map(|d| (d.date, d.et_ref)).collect();

        for (variety, code, weight_offset) in VARIETIES {
            let plot = format!("{site}-{code}");
            let budbreak = plus(date(4, 6), rng.random_range(0..5));
            let bloom = plus(budbreak, 54 + rng.random_range(0..5));
            let veraison = plus(date(7, 29), rng.random_range(0..7));
            let harvest = plus(date(9, 10), rng.random_range(0..9));
            for (s, d) in [
                (Stage::Budbreak, budbreak),
                (Stage::Bloom, bloom),
                (Stage::Veraison, veraison),
                (Stage::Harvest, harvest),
            ] {
                phenology.push(PhenologyRow {
                    plot_id: plot.clone(),
                    stage: s,
                    date: d,
                });
            }
            for t in [Treatment::I0, Treatment::I1] {
                let plateau_ratio = rng.random_range(0.65..0.75) + if t == Treatment::I1 { 0.02 } else { 0.0 };
                let curvature = rng.random_range(0.0014..0.0022);
                let floor = match t {
                    Treatment::I0 => rng.random_range(0.2..0.3),
                    Treatment::I1 => rng.random_range(0.4..0.5),
                };
                // the plateau is where the linear rise meets the cap
                let cap_edge = plateau_ratio - SLOPE * SLOPE / (4.0 * curvature);
                let linear_start = BASE_RATIO + SLOPE * RISE_DAYS / 2.0;
                let plateau_day = budbreak.ordinal0() as f64
                    + RISE_DAYS
                    + (cap_edge - linear_start) / SLOPE
                    + SLOPE / (2.0 * curvature);
                let plateau_date = NaiveDate::from_yo_opt(YEAR, plateau_day.round() as u32 + 1).expect("in season");
                let lag = if t == Treatment::I0 { 5 } else { 10 };
                let mut truth = PlotTruth {
                    plot_id: plot.clone(),
                    site: site.to_string(),
                    variety: variety.to_string(),
                    treatment: t,
                    budbreak,
                    bloom,
                    veraison,
                    harvest,
                    plateau_day,
                    plateau_date,
                    plateau_ratio,
                    curvature,
                    floor,
                    first_lwp_stress: plateau_date,
                };

                // weekly predawn readings from May 1st
                let stress_from = plus(plateau_date, lag);
                let mut first_stress = None;
                let mut d = date(5, 1);
                while d <= date(9, 15) {
                    let stressed = d >= stress_from;
                    if stressed && first_stress.is_none() {
                        first_stress = Some(d);
                    }
                    let v = if stressed {
                        let depth = if t == Treatment::I0 { 0.5 } else { 0.15 };
                        -0.35 - depth * rng.random::<f64>()
                    } else {
                        -0.12 - 0.1 * rng.random::<f64>()
                    };
                    lwp.push(LwpRecord {
                        plot_id: plot.clone(),
                        treatment: t,
                        date: d,
                        lwp_mpa: round(v, 2),
                    });
                    d = plus(d, 7);
                }
                truth.first_lwp_stress = first_stress.expect("stress before mid-September");

                // sap flow of two sensors
                let mut rows = Vec::new();
                for (k, coef) in [("a", 1.0), ("b", SECOND_SENSOR_COEF)] {
                    let sensor = format!("{plot}-{t}-{k}");
                    let unreliable = sensor == UNRELIABLE_SENSOR;
                    for day in weather.chunks(24) {
                        let dd = day[0].timestamp.date();
                        let t_mm = truth.ratio(dd.ordinal0() as f64) * et[&dd];
                        let total: f64 = day
                            .iter()
                            .filter(|h| h.solar_radiation >= 10.0)
                            .map(|h| h.solar_radiation + 50.0)
                            .sum();
                        for h in day {
                            let rate = if h.solar_radiation >= 10.0 {
                                let grams = t_mm * 1000.0 * GROUND_AREA_M2 * (h.solar_radiation + 50.0) / total;
                                let g = grams / coef * (1.0 + HOURLY_NOISE * noise.sample(&mut rng));
                                if unreliable && rng.random::<f64>() < UNRELIABLE_FRACTION {
                                    if rng.random::<bool>() {
                                        None
                                    } else {
                                        Some(9999.0)
                                    }
                                } else {
                                    Some(round(g, 3))
                                }
                            } else {
                                Some(round(0.5 * rng.random::<f64>(), 3))
                            };
                            rows.push(SapRow {
                                timestamp: h.timestamp,
                                sensor_id: sensor.clone(),
                                plot_id: plot.clone(),
                                treatment: t,
                                rate_g_per_h: rate,
                            });
                        }
                    }
                }
                put(&format!("sapflow/{plot}_{t}.csv"), &to_csv(&rows)?)?;

                // weekly fruit samples from veraison; drier vines end with
                // smaller, sweeter berries
                let stress = 1.0 - floor / plateau_ratio;
                let final_sugar = 190.0 + 60.0 * stress + 4.0 * noise.sample(&mut rng);
                let final_sugar = if (plot.as_str(), t) == NEVER_MATURE {
                    120.0
                } else {
                    final_sugar
                };
                let final_weight = 1.9 - 0.9 * stress + weight_offset + 0.03 * noise.sample(&mut rng);
                let final_acid = 4.5 + 0.5 * rng.random::<f64>();
                let mut d = plus(veraison, 3);
                let last = harvest - Days::new(2);
                while d <= last {
                    let x = (d - veraison).num_days() as f64;
                    let sugar = 60.0 + (final_sugar - 60.0) * (1.0 - (-x / 15.0).exp());
                    let acid = final_acid + (22.0 - final_acid) * (-x / 12.0).exp();
                    let weight = final_weight * (0.7 + 0.3 * (1.0 - (-x / 12.0).exp()));
                    fruit.push(FruitSample {
                        plot_id: plot.clone(),
                        treatment: t,
                        date: d,
                        berry_weight: round(weight, 3),
                        sugar: round(sugar, 1),
                        acidity: round(acid, 2),
                        anthocyanins: Some(round(900.0 + 600.0 * stress + 20.0 * noise.sample(&mut rng), 0)),
                        assimilable_nitrogen: None,
                    });
                    d = plus(d, 7);
                }
                truths.push(truth);
            }
        }
    }
    put("phenology.csv", &to_csv(&phenology)?)?;
    put("lwp.csv", &to_csv(&lwp)?)?;
    put("fruit.csv", &to_csv(&fruit)?)?;
    let config = dir.join(crate::config::CONFIG_FILE);
    std::fs::write(&config, config_text(seed)).map_err(PipelineError::io(format!("writing {}", config.display())))?;
    let fixture = Fixture { seed, truths };
    let truth_json = serde_json::to_vec_pretty(&fixture).map_err(|e| PipelineError::Internal(e.to_string()))?;
    put("truth.json", &truth_json)?;
    Ok(fixture)
}

/// Ingest the raw files written by [`write_fixture`].
pub fn ingest_fixture(project: &Project) -> Result<(), PipelineError> {
    let raw = project.root().join("raw");
    let list = |sub: &str| -> Result<Vec<PathBuf>, PipelineError> {
        let dir = raw.join(sub);
        let mut v: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(PipelineError::io(format!("listing {}", dir.display())))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        Ok(v)
    };
    for f in list("meteo")? {
        ingest::ingest(project, Kind::Meteo, &[f], None)?;
    }
    ingest::ingest(project, Kind::Sapflow, &list("sapflow")?, None)?;
    ingest::ingest(project, Kind::Phenology, &[raw.join("phenology.csv")], None)?;
    ingest::ingest(project, Kind::Lwp, &[raw.join("lwp.csv")], None)?;
    ingest::ingest(project, Kind::Fruit, &[raw.join("fruit.csv")], None)?;
    Ok(())
}

/// Generate, open and ingest a fixture project in `dir`.
pub fn create_project(dir: &Path, seed: u64) -> Result<(Project, Fixture), PipelineError> {
    let fixture = write_fixture(dir, seed)?;
    let project = Project::open(dir)?;
    ingest_fixture(&project)?;
    Ok((project, fixture))
}
