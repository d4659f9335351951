//! Randomized growing seasons and a brute-force reading of the candidate
//! rules that shares no code with the detector.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vinestress::knowledge::KnowledgeBase;
use vinestress::kstar::{compute_ratio, detect_candidates, CandidateRuleConfig, LwpRecord};
use vinestress::meteo::DailyMeteoRecord;
use vinestress::phenology::{PhenologyCalendar, Stage};
use vinestress::sapflow::{DailyTranspiration, TranspirationSeries};
use vinestress::Treatment;

pub const PLOT: &str = "synthetic";

pub struct Season {
    pub dailies: Vec<DailyMeteoRecord>,
    pub transpiration: TranspirationSeries,
    pub calendar: PhenologyCalendar,
    pub lwp: Vec<LwpRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    /// Multiplicative day-to-day noise on T.
    pub noise: f64,
    /// Probability that a day of T is missing.
    pub missing: f64,
    /// Probability of a zero ETref day.
    pub zero_et: f64,
    /// Whether predawn readings may cross the stress level.
    pub stress: bool,
    /// Upper end of the random daily VPD maximum, kPa.
    pub vpd_top: f64,
}

impl Shape {
    pub const NOISY: Shape = Shape {
        noise: 0.04,
        missing: 0.03,
        zero_et: 0.01,
        stress: true,
        vpd_top: 4.6,
    };
    pub const CLEAN: Shape = Shape {
        noise: 0.0,
        missing: 0.0,
        zero_et: 0.0,
        stress: false,
        vpd_top: 3.0,
    };
}

fn ymd(m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2012, m, d).unwrap()
}

/// Fraction of the way to the peak, concave so the ratio has a rounded top.
fn canopy(gdd: f64, budbreak_gdd: f64, peak_gdd: f64, k0: f64, kp: f64) -> f64 {
    if gdd <= budbreak_gdd {
        return k0;
    }
    let x = (gdd - budbreak_gdd) / (peak_gdd - budbreak_gdd);
    if x <= 1.0 {
        k0 + (kp - k0) * (1.0 - (1.0 - x) * (1.0 - x))
    } else {
        // slow decline after the peak
        kp * (1.0 - 0.15 * (x - 1.0) * (x - 1.0)).max(0.5)
    }
}

pub fn season(seed: u64, shape: Shape) -> Season {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let first = ymd(4, 1);
    let days = 183u64;
    let mut gdd = 0.0;
    let mut dailies = Vec::new();
    for i in 0..days {
        let date = first + Days::new(i);
        let season = (std::f64::consts::PI * i as f64 / days as f64).sin();
        let t_mean = 12.0 + 13.0 * season + 2.0 * unit.sample(&mut rng);
        gdd += (t_mean - 10.0).max(0.0);
        let et_ref = if rng.random::<f64>() < shape.zero_et {
            0.0
        } else {
            (1.5 + 5.0 * season + 0.6 * unit.sample(&mut rng)).max(0.4)
        };
        dailies.push(DailyMeteoRecord {
            date,
            t_mean,
            t_min: t_mean - 6.0,
            t_max: t_mean + 6.0,
            et_ref,
            vpd_max: 1.0 + (shape.vpd_top - 1.0) * (0.4 * season + 0.6 * rng.random::<f64>()),
            gdd_cum: gdd,
            vpd_mean: None,
        });
    }
    let at = |d: NaiveDate| dailies.iter().find(|r| r.date == d).map(|r| r.gdd_cum).unwrap();
    let budbreak = ymd(4, 5) + Days::new(rng.random_range(0..20));
    let bloom = budbreak + Days::new(rng.random_range(40..55));
    let nouaison = bloom + Days::new(rng.random_range(10..20));
    let veraison = ymd(7, 18) + Days::new(rng.random_range(0..25));
    let maturity = veraison + Days::new(rng.random_range(25..40));
    let harvest = maturity + Days::new(rng.random_range(0..10));
    let mut calendar = PhenologyCalendar::new(PLOT);
    for (stage, date) in [
        (Stage::Budbreak, budbreak),
        (Stage::Bloom, bloom),
        (Stage::Nouaison, nouaison),
        (Stage::Veraison, veraison),
        (Stage::Maturity, maturity),
        (Stage::Harvest, harvest),
    ] {
        calendar.set(stage, date, Some(at(date)));
    }

    let k0 = 0.1;
    let kp = rng.random_range(0.45..0.9);
    let b_gdd = at(budbreak);
    let peak_gdd = b_gdd + rng.random_range(450.0..850.0);
    let stress_onset = (shape.stress && rng.random::<f64>() < 0.7).then(|| ymd(5, 20) + Days::new(rng.random_range(0..80)));
    let daily = dailies
        .iter()
        .map(|d| {
            let mut k = canopy(d.gdd_cum, b_gdd, peak_gdd, k0, kp);
            if let Some(s) = stress_onset {
                if d.date > s {
                    k *= (1.0 - 0.006 * (d.date - s).num_days() as f64).max(0.3);
                }
            }
            let t = k * d.et_ref * (1.0 + shape.noise * unit.sample(&mut rng));
            let missing = rng.random::<f64>() < shape.missing;
            DailyTranspiration {
                date: d.date,
                t_mm: (!missing).then_some(t.max(0.0)),
            }
        })
        .collect();

    let mut lwp = Vec::new();
    let mut date = budbreak;
    while date <= harvest {
        let base = -0.08 - 0.03 * rng.random::<f64>();
        let v = match stress_onset {
            Some(s) if date > s => base - 0.25 - 0.004 * (date - s).num_days() as f64,
            _ => base - 0.1 * rng.random::<f64>(),
        };
        lwp.push(LwpRecord {
            plot_id: PLOT.into(),
            treatment: Treatment::I0,
            date,
            lwp_mpa: v,
        });
        date = date + Days::new(7);
    }
    Season {
        dailies,
        transpiration: TranspirationSeries {
            plot_id: PLOT.into(),
            treatment: Treatment::I0,
            daily,
            smoothed: false,
        },
        calendar,
        lwp,
    }
}

/// Ratio straight from the inputs.
pub fn ratio_of(s: &Season, date: NaiveDate) -> Option<f64> {
    let day = s.dailies.iter().find(|d| d.date == date)?;
    let t = s.transpiration.daily.iter().find(|d| d.date == date)?.t_mm?;
    (day.et_ref > 0.0).then(|| t / day.et_ref)
}

/// The four rules read literally, one date at a time.
pub fn admissible(s: &Season, date: NaiveDate, cfg: &CandidateRuleConfig) -> bool {
    let Some(r) = ratio_of(s, date) else { return false };
    let budbreak = s.calendar.date(Stage::Budbreak).unwrap();
    let veraison = s.calendar.date(Stage::Veraison).unwrap();
    if date < budbreak || date > veraison {
        return false;
    }
    // every reading at or before the date must be unstressed
    if s.lwp.iter().any(|l| l.date <= date && l.lwp_mpa < cfg.lwp_stress_level) {
        return false;
    }
    match s.dailies.iter().find(|d| d.date == date) {
        Some(d) if d.vpd_max <= cfg.vpd_limit => {}
        _ => return false,
    }
    let (Some(before), Some(after)) = (
        date.pred_opt().and_then(|d| ratio_of(s, d)),
        date.succ_opt().and_then(|d| ratio_of(s, d)),
    ) else {
        return false;
    };
    let slope = (after - before) / 2.0;
    let curvature = after - 2.0 * r + before;
    slope.abs() <= cfg.derivative_epsilon && curvature < 0.0
}

#[derive(Debug, Default)]
pub struct Soundness {
    pub seasons: usize,
    pub emitted: usize,
    pub false_admits: usize,
    /// Dates the brute force admits but the detector left out.
    pub missed: usize,
    pub wrong_values: usize,
    pub per_season: Vec<usize>,
    pub elapsed: Duration,
}

pub fn soundness(seasons: u64, shape: Shape) -> Soundness {
    let start = Instant::now();
    let kb = KnowledgeBase::shipped_default();
    let cfg = CandidateRuleConfig::default();
    let mut out = Soundness::default();
    for seed in 0..seasons {
        let s = season(seed, shape);
        let ratio = compute_ratio(&s.transpiration, &s.dailies).unwrap();
        let det = detect_candidates(&ratio, &s.calendar, &s.lwp, &s.dailies, &cfg, &kb).unwrap();
        let emitted: BTreeMap<NaiveDate, f64> = det.candidates.iter().map(|c| (c.date, c.k_value)).collect();
        let expected: BTreeSet<NaiveDate> = s
            .dailies
            .iter()
            .map(|d| d.date)
            .filter(|&d| admissible(&s, d, &cfg))
            .collect();
        for (date, k) in &emitted {
            if !admissible(&s, *date, &cfg) {
                out.false_admits += 1;
            }
            if ratio_of(&s, *date) != Some(*k) {
                out.wrong_values += 1;
            }
        }
        out.missed += expected.iter().filter(|d| !emitted.contains_key(d)).count();
        out.emitted += emitted.len();
        out.per_season.push(emitted.len());
        out.seasons += 1;
    }
    out.elapsed = start.elapsed();
    out
}
