//! Peak basal crop coefficient, KcB curve and water-stress coefficient.
//!
//! `r(t) = T(t) / ETref(t)` reaches its maximum `K*` when the canopy stops
//! growing and the soil is still wet. Candidate dates for `t_K*` are filtered
//! by four rules read from the knowledge base, then one candidate is chosen
//! (by a person, or automatically) and the KcB curve is built as a linear rise
//! on the thermal-time axis followed by a plateau. `Ks = T / (KcB · ETref)`.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{Bindings, KnowledgeBase, KnowledgeError, Value};
use crate::meteo::DailyMeteoRecord;
use crate::phenology::{PhenologyCalendar, Stage};
use crate::sapflow::TranspirationSeries;
use crate::Treatment;

#[derive(Debug, Error, PartialEq)]
pub enum KstarError {
    #[error("transpiration and weather series share no date")]
    EmptyIntersection,
    #[error("no candidate to select from")]
    NoCandidates,
    #[error("candidate index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("phenology calendar lacks a {0} date")]
    MissingStage(Stage),
    #[error("t_K* ({t_kstar}) must come after budbreak ({budbreak}) in thermal time")]
    BeforeBudbreak { t_kstar: NaiveDate, budbreak: NaiveDate },
    #[error("knowledge base defines no predicate for rule '{0}'")]
    MissingPredicate(Rule),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

/// Predawn leaf water potential reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwpRecord {
    pub plot_id: String,
    pub treatment: Treatment,
    pub date: NaiveDate,
    pub lwp_mpa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub date: NaiveDate,
    pub gdd_cum: f64,
    /// Missing where T is missing or ETref is zero.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSeries {
    pub plot_id: String,
    pub treatment: Treatment,
    pub points: Vec<RatioPoint>,
    pub smoothed: bool,
}

impl RatioSeries {
    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        self.points
            .binary_search_by_key(&date, |p| p.date)
            .ok()
            .and_then(|i| self.points[i].r)
    }
}

/// The four candidate filters, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Phenology,
    PredawnLwp,
    HeatSpike,
    CurveShape,
}

impl Rule {
    pub const ALL: [Rule; 4] = [Rule::Phenology, Rule::PredawnLwp, Rule::HeatSpike, Rule::CurveShape];

    pub fn id(self) -> &'static str {
        match self {
            Rule::Phenology => "phenology",
            Rule::PredawnLwp => "predawn_lwp",
            Rule::HeatSpike => "heat_spike",
            Rule::CurveShape => "curve_shape",
        }
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Daily VPD figure the heat-spike rule compares with its limit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VpdStatistic {
    #[default]
    Max,
    Mean,
}

impl VpdStatistic {
    pub fn of(self, d: &DailyMeteoRecord) -> Option<f64> {
        match self {
            VpdStatistic::Max => Some(d.vpd_max),
            VpdStatistic::Mean => d.vpd_mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateRuleConfig {
    /// kPa
    pub vpd_limit: f64,
    /// MPa; a predawn reading strictly below this reveals stress.
    pub lwp_stress_level: f64,
    /// per day
    pub derivative_epsilon: f64,
    pub vpd_statistic: VpdStatistic,
}

impl Default for CandidateRuleConfig {
    fn default() -> Self {
        CandidateRuleConfig {
            vpd_limit: 3.5,
            lwp_stress_level: -0.3,
            derivative_epsilon: 0.01,
            vpd_statistic: VpdStatistic::Max,
        }
    }
}

impl CandidateRuleConfig {
    /// Levels from the knowledge base, most specific entry first; absent
    /// levels keep the built-in defaults.
    pub fn from_kb(kb: &KnowledgeBase, region: Option<&str>, variety: Option<&str>) -> Self {
        let d = CandidateRuleConfig::default();
        CandidateRuleConfig {
            vpd_limit: kb.level("VpdLimit", region, variety).unwrap_or(d.vpd_limit),
            lwp_stress_level: kb.level("LwpStressLevel", region, variety).unwrap_or(d.lwp_stress_level),
            derivative_epsilon: kb.level("DerivativeEpsilon", region, variety).unwrap_or(d.derivative_epsilon),
            vpd_statistic: d.vpd_statistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub date: NaiveDate,
    pub gdd_cum: f64,
    pub k_value: f64,
    pub passed_rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub candidates: Vec<Candidate>,
    /// Dates still standing after each rule, cumulatively.
    pub survivors: BTreeMap<Rule, usize>,
    /// First rule leaving no date standing.
    pub eliminated_by: Option<Rule>,
}

/// Pointwise ratio on the dates both series share.
pub fn compute_ratio(t_series: &TranspirationSeries, dailies: &[DailyMeteoRecord]) -> Result<RatioSeries, KstarError> {
    let t: BTreeMap<NaiveDate, Option<f64>> = t_series.daily.iter().map(|d| (d.date, d.t_mm)).collect();
    let points: Vec<RatioPoint> = dailies
        .iter()
        .filter_map(|d| {
            let tv = t.get(&d.date)?;
            let r = match tv {
                Some(tv) if d.et_ref > 0.0 => Some(tv / d.et_ref),
                _ => None,
            };
            Some(RatioPoint {
                date: d.date,
                gdd_cum: d.gdd_cum,
                r,
            })
        })
        .collect();
    if points.is_empty() {
        return Err(KstarError::EmptyIntersection);
    }
    Ok(RatioSeries {
        plot_id: t_series.plot_id.clone(),
        treatment: t_series.treatment,
        points,
        smoothed: t_series.smoothed,
    })
}

/// Central differences on the calendar axis: `(r'(t), r''(t))`.
pub fn derivatives(r: &RatioSeries, date: NaiveDate) -> Option<(f64, f64)> {
    let prev = r.get(date.pred_opt()?)?;
    let next = r.get(date.succ_opt()?)?;
    let cur = r.get(date)?;
    Some(((next - prev) / 2.0, next - 2.0 * cur + prev))
}

/// First reading strictly below the stress level.
pub fn first_stress_date(lwp: &[LwpRecord], level: f64) -> Option<NaiveDate> {
    lwp.iter().filter(|l| l.lwp_mpa < level).map(|l| l.date).min()
}

/// Days of `[start, end]` failing the heat-spike rule, including days
/// without the chosen statistic.
pub fn heat_spike_days(
    dailies: &[DailyMeteoRecord],
    start: NaiveDate,
    end: NaiveDate,
    vpd_limit: f64,
    statistic: VpdStatistic,
) -> Vec<NaiveDate> {
    dailies
        .iter()
        .filter(|d| d.date >= start && d.date <= end && statistic.of(d).is_none_or(|v| v > vpd_limit))
        .map(|d| d.date)
        .collect()
}

fn rule_predicate(kb: &KnowledgeBase, rule: Rule, bindings: &Bindings) -> Result<bool, KstarError> {
    let (conditions, subjects): (&[&str], &[&str]) = match rule {
        Rule::Phenology => (&["AfterBudbreak", "BeforeVeraison"], &[]),
        Rule::PredawnLwp => (&["BeforeLwpStress"], &[]),
        Rule::HeatSpike => (&[], &["VPD"]),
        Rule::CurveShape => (&[], &["KStarDot", "KStarDdot"]),
    };
    let attached = kb.conditions_of("KcB");
    for name in conditions {
        let (_, cond) = attached
            .iter()
            .find(|(n, _)| n == name)
            .ok_or(KstarError::MissingPredicate(rule))?;
        if !cond.evaluate(bindings)? {
            return Ok(false);
        }
    }
    for subject in subjects {
        let constraints = kb.constraints_of(subject);
        if constraints.is_empty() {
            return Err(KstarError::MissingPredicate(rule));
        }
        for (_, c) in constraints {
            if !c.evaluate(subject, bindings)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Dates satisfying every rule. Rules are applied in order so the
/// diagnostic can name the first one that leaves nothing.
pub fn detect_candidates(
    r: &RatioSeries,
    calendar: &PhenologyCalendar,
    lwp: &[LwpRecord],
    dailies: &[DailyMeteoRecord],
    cfg: &CandidateRuleConfig,
    kb: &KnowledgeBase,
) -> Result<Detection, KstarError> {
    let budbreak = calendar.date(Stage::Budbreak).ok_or(KstarError::MissingStage(Stage::Budbreak))?;
    let veraison = calendar.date(Stage::Veraison).ok_or(KstarError::MissingStage(Stage::Veraison))?;
    let stress = first_stress_date(lwp, cfg.lwp_stress_level).unwrap_or(NaiveDate::MAX);
    let vpd: BTreeMap<NaiveDate, f64> = dailies
        .iter()
        .filter_map(|d| cfg.vpd_statistic.of(d).map(|v| (d.date, v)))
        .collect();

    let mut base = Bindings::new();
    base.insert("Budbreak".into(), Value::Date(budbreak));
    base.insert("Veraison".into(), Value::Date(veraison));
    base.insert("FirstLwpStress".into(), Value::Date(stress));
    base.insert("VpdLimit".into(), Value::Number(cfg.vpd_limit));
    base.insert("DerivativeEpsilon".into(), Value::Number(cfg.derivative_epsilon));

    let mut standing: Vec<(RatioPoint, Bindings)> = r
        .points
        .iter()
        .filter(|p| p.r.is_some())
        .map(|p| {
            let mut b = base.clone();
            b.insert("CandidateDate".into(), Value::Date(p.date));
            // unverifiable days fail the rules that need them
            b.insert("VPD".into(), Value::Number(vpd.get(&p.date).copied().unwrap_or(f64::INFINITY)));
            let (d1, d2) = derivatives(r, p.date).unwrap_or((f64::INFINITY, f64::INFINITY));
            b.insert("KStarDot".into(), Value::Number(d1.abs()));
            b.insert("KStarDdot".into(), Value::Number(d2));
            (*p, b)
        })
        .collect();

    let mut survivors = BTreeMap::new();
    let mut eliminated_by = None;
    for rule in Rule::ALL {
        let mut kept = Vec::with_capacity(standing.len());
        for (p, b) in standing {
            if rule_predicate(kb, rule, &b)? {
                kept.push((p, b));
            }
        }
        standing = kept;
        survivors.insert(rule, standing.len());
        if standing.is_empty() && eliminated_by.is_none() {
            eliminated_by = Some(rule);
        }
    }
    let candidates = standing
        .into_iter()
        .map(|(p, _)| Candidate {
            date: p.date,
            gdd_cum: p.gdd_cum,
            k_value: p.r.unwrap_or_default(),
            passed_rules: Rule::ALL.to_vec(),
        })
        .collect();
    Ok(Detection {
        candidates,
        survivors,
        eliminated_by,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Manual,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    /// 1-based position in the candidate list.
    Index(usize),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KstarSelection {
    pub t_kstar: NaiveDate,
    pub gdd_cum: f64,
    pub k_star: f64,
}

/// Manual choice by index, or the candidate with the largest ratio
/// (earliest on ties).
pub fn select_kstar(candidates: &[Candidate], choice: Choice) -> Result<KstarSelection, KstarError> {
    if candidates.is_empty() {
        return Err(KstarError::NoCandidates);
    }
    let c = match choice {
        Choice::Index(i) => {
            if i == 0 || i > candidates.len() {
                return Err(KstarError::IndexOutOfRange {
                    index: i,
                    len: candidates.len(),
                });
            }
            &candidates[i - 1]
        }
        Choice::Auto => candidates
            .iter()
            .reduce(|best, c| {
                if c.k_value > best.k_value || (c.k_value == best.k_value && c.date < best.date) {
                    c
                } else {
                    best
                }
            })
            .expect("non-empty"),
    };
    Ok(KstarSelection {
        t_kstar: c.date,
        gdd_cum: c.gdd_cum,
        k_star: c.k_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KcbCurve {
    pub budbreak: NaiveDate,
    pub budbreak_gdd: f64,
    pub t_kstar: NaiveDate,
    pub kstar_gdd: f64,
    pub k_star: f64,
    pub k0: f64,
}

impl KcbCurve {
    /// KcB at a thermal time.
    pub fn at(&self, gdd: f64) -> f64 {
        if gdd >= self.kstar_gdd {
            self.k_star
        } else if gdd <= self.budbreak_gdd {
            self.k0
        } else {
            let f = (gdd - self.budbreak_gdd) / (self.kstar_gdd - self.budbreak_gdd);
            self.k0 + f * (self.k_star - self.k0)
        }
    }
}

pub fn build_kcb(selection: &KstarSelection, calendar: &PhenologyCalendar, k0: f64) -> Result<KcbCurve, KstarError> {
    let budbreak = calendar.date(Stage::Budbreak).ok_or(KstarError::MissingStage(Stage::Budbreak))?;
    let budbreak_gdd = calendar.gdd(Stage::Budbreak).ok_or(KstarError::MissingStage(Stage::Budbreak))?;
    if selection.t_kstar <= budbreak || selection.gdd_cum <= budbreak_gdd {
        return Err(KstarError::BeforeBudbreak {
            t_kstar: selection.t_kstar,
            budbreak,
        });
    }
    Ok(KcbCurve {
        budbreak,
        budbreak_gdd,
        t_kstar: selection.t_kstar,
        kstar_gdd: selection.gdd_cum,
        k_star: selection.k_star,
        k0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsPoint {
    pub date: NaiveDate,
    pub gdd_cum: f64,
    pub ks: Option<f64>,
    /// Raw ratio exceeded the cap.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsSeries {
    pub plot_id: String,
    pub treatment: Treatment,
    pub points: Vec<KsPoint>,
}

pub const DEFAULT_KS_CAP: f64 = 1.2;

pub fn compute_ks(t_series: &TranspirationSeries, kcb: &KcbCurve, dailies: &[DailyMeteoRecord], ks_cap: f64) -> KsSeries {
    let t: BTreeMap<NaiveDate, Option<f64>> = t_series.daily.iter().map(|d| (d.date, d.t_mm)).collect();
    let points = dailies
        .iter()
        .filter_map(|d| {
            let tv = t.get(&d.date)?;
            let tmax = kcb.at(d.gdd_cum) * d.et_ref;
            let (ks, clamped) = match tv {
                Some(tv) if tmax > 0.0 => {
                    let raw = tv / tmax;
                    (Some(raw.clamp(0.0, ks_cap)), raw > ks_cap)
                }
                _ => (None, false),
            };
            Some(KsPoint {
                date: d.date,
                gdd_cum: d.gdd_cum,
                ks,
                clamped,
            })
        })
        .collect();
    KsSeries {
        plot_id: t_series.plot_id.clone(),
        treatment: t_series.treatment,
        points,
    }
}
