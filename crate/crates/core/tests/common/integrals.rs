//! Window integrals against antiderivatives of piecewise-linear Ks.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinestress::aggregate::{build_aggregates, trapz_ks, AggregateRow};
use vinestress::kstar::{KsPoint, KsSeries};
use vinestress::phenology::{PhenologyCalendar, Stage};
use vinestress::Treatment;

pub const TABLE1: &str = include_str!("../../data/table1.csv");

/// Continuous piecewise-linear function through `knots`, flat outside them.
#[derive(Debug, Clone)]
pub struct Broken {
    pub knots: Vec<(f64, f64)>,
}

impl Broken {
    pub fn at(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if x <= w[1].0 {
                let b = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
                return w[0].1 + b * (x - w[0].0);
            }
        }
        k[k.len() - 1].1
    }

    /// ∫ over [lo, hi] from the antiderivative `a·x + b·x²/2` of each piece.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let k = &self.knots;
        let mut total = 0.0;
        for w in k.windows(2) {
            let (x0, x1) = (w[0].0.max(lo), w[1].0.min(hi));
            if x1 <= x0 {
                continue;
            }
            let b = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            let a = w[0].1 - b * w[0].0;
            total += a * (x1 - x0) + b * (x1 * x1 - x0 * x0) / 2.0;
        }
        total
    }
}

pub struct Synthetic {
    pub ks: KsSeries,
    pub truth: Broken,
    pub calendar: PhenologyCalendar,
}

/// Daily thermal-time steps, knots on sample days, random window stages.
pub fn synthetic(seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(120..200usize);
    let mut gdd = vec![0.0];
    for _ in 1..n {
        let step = rng.random_range(0.0..22.0);
        gdd.push(gdd.last().unwrap() + step);
    }
    // strictly increasing knots picked among the sample days
    let mut picks: Vec<usize> = (0..rng.random_range(2..6)).map(|_| rng.random_range(1..n - 1)).collect();
    picks.extend([0, n - 1]);
    picks.sort_unstable();
    picks.dedup_by(|a, b| gdd[*a] <= gdd[*b]);
    let truth = Broken {
        knots: picks.iter().map(|&i| (gdd[i], rng.random_range(0.0..1.2))).collect(),
    };
    let first = NaiveDate::from_ymd_opt(2012, 4, 1).unwrap();
    let date = |i: usize| first + Days::new(i as u64);
    let ks = KsSeries {
        plot_id: "synthetic".into(),
        treatment: Treatment::I1,
        points: gdd
            .iter()
            .enumerate()
            .map(|(i, &g)| KsPoint {
                date: date(i),
                gdd_cum: g,
                ks: Some(truth.at(g)),
                clamped: false,
            })
            .collect(),
    };
    let mut stages: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
    stages.sort_unstable();
    let mut calendar = PhenologyCalendar::new("synthetic");
    // stage thermal times fall between samples as well as on them
    let jitter = |i: usize, r: &mut ChaCha8Rng| {
        if i + 1 < n && r.random::<bool>() {
            gdd[i] + r.random::<f64>() * (gdd[i + 1] - gdd[i])
        } else {
            gdd[i]
        }
    };
    for (stage, i) in [Stage::Nouaison, Stage::Veraison, Stage::Maturity, Stage::Harvest]
        .into_iter()
        .zip(stages)
    {
        let g = jitter(i, &mut rng);
        calendar.set(stage, date(i), Some(g));
    }
    Synthetic { ks, truth, calendar }
}

#[derive(Debug, Default)]
pub struct IntegralOutcome {
    pub windows: usize,
    pub max_closed_form_err: f64,
    pub max_additivity_err: f64,
    pub table_rows: usize,
    /// Published rows whose season total differs from the sum of halves by more than 0.2.
    pub table_misses: Vec<(String, Treatment, f64)>,
}

impl IntegralOutcome {
    pub fn passed(&self) -> bool {
        self.max_closed_form_err <= 1e-9 && self.max_additivity_err <= 1e-9 && self.table_rows == 16 && self.table_misses.is_empty()
    }
}

pub fn table1() -> Vec<AggregateRow> {
    csv::Reader::from_reader(TABLE1.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("published table parses")
}

pub fn integral_checks(seeds: u64) -> IntegralOutcome {
    let mut out = IntegralOutcome::default();
    for seed in 0..seeds {
        let s = synthetic(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let top = s.ks.points.last().unwrap().gdd_cum;
        for _ in 0..10 {
            let a = rng.random_range(0.0..top);
            let b = rng.random_range(0.0..top);
            let (lo, hi) = (a.min(b), a.max(b));
            if hi <= lo {
                continue;
            }
            let got = trapz_ks(&s.ks, lo, hi).unwrap();
            out.max_closed_form_err = out.max_closed_form_err.max((got - s.truth.integral(lo, hi)).abs());
            out.windows += 1;
        }
        if let Ok(rec) = build_aggregates(&s.ks, &s.calendar) {
            out.max_additivity_err = out.max_additivity_err.max((rec.nou_harv - rec.nou_ver - rec.ver_harv).abs());
        }
    }
    let rows = table1();
    out.table_rows = rows.len();
    for r in rows {
        let gap = r.nou_harv - (r.nou_ver + r.ver_harv);
        if gap.abs() > 0.2 {
            out.table_misses.push((r.site, r.treatment, gap));
        }
    }
    out
}
