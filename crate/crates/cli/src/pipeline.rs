//! Stage functions. Each stage reads its inputs from the store, writes its
//! artifacts with their input hashes and returns what it computed.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use vinestress::aggregate::{build_aggregates, maturity_date, AggregateRecord, AggregateRow, FruitSample};
use vinestress::cart::{self, Column, Dataset, RegressionTree};
use vinestress::flrti::{self, CvResult, FlrtiModel, FunctionalData, FunctionalSample};
use vinestress::knowledge::apply_shift;
use vinestress::kstar::{
    build_kcb, compute_ks, compute_ratio, detect_candidates, first_stress_date, heat_spike_days, select_kstar, Candidate,
    CandidateRuleConfig, Choice, Detection, KcbCurve, KsPoint, KsSeries, KstarSelection, LwpRecord, RatioSeries, Rule,
    SelectionMode,
};
use vinestress::meteo::{assign_thermal_time, daily_from_hourly, default_gdd_origin, DailyMeteoRecord, HourlyMeteoRecord};
use vinestress::phenology::{PhenologyCalendar, Stage};
use vinestress::sapflow::{daily_transpiration, qc_sensor, smooth_ma, DailyTranspiration, SensorStream, TranspirationSeries};
use vinestress::Treatment;

use crate::config::{Plot, CONFIG_FILE};
use crate::error::PipelineError;
use crate::ingest::{meteo_file, PhenologyRow, SapRow, FRUIT_FILE, LWP_FILE, PHENOLOGY_FILE, SAPFLOW_DIR};
use crate::store::Project;

pub fn stem(plot: &str, treatment: Treatment) -> String {
    format!("{plot}_{treatment}")
}

pub fn dailies_file(site: &str) -> String {
    format!("derived/dailies/{site}.csv")
}
pub fn incomplete_days_file(site: &str) -> String {
    format!("derived/dailies/{site}.incomplete.json")
}
pub fn transpiration_file(plot: &str, t: Treatment) -> String {
    format!("derived/transpiration/{}.csv", stem(plot, t))
}
pub fn qc_file(plot: &str, t: Treatment) -> String {
    format!("derived/transpiration/{}.qc.json", stem(plot, t))
}
pub fn calendar_file(plot: &str, t: Treatment) -> String {
    format!("derived/phenology/{}.json", stem(plot, t))
}
pub fn ratio_file(plot: &str, t: Treatment) -> String {
    format!("derived/ratio/{}.json", stem(plot, t))
}
pub fn candidates_file(plot: &str, t: Treatment) -> String {
    format!("derived/candidates/{}.json", stem(plot, t))
}
pub fn diagnostics_file(plot: &str, t: Treatment) -> String {
    format!("derived/candidates/{}.diagnostics.json", stem(plot, t))
}
pub fn selection_file(plot: &str, t: Treatment) -> String {
    format!("selections/{}.json", stem(plot, t))
}
pub fn kcb_file(plot: &str, t: Treatment) -> String {
    format!("derived/ks/{}.kcb.json", stem(plot, t))
}
pub fn ks_file(plot: &str, t: Treatment) -> String {
    format!("derived/ks/{}.csv", stem(plot, t))
}
pub const AGGREGATES_FILE: &str = "derived/aggregates.csv";
pub const REPORT_FILE: &str = "derived/report.md";
pub const MODELS_SUMMARY_FILE: &str = "derived/models/summary.json";

fn config_key() -> String {
    CONFIG_FILE.to_string()
}

fn stage_err(project: &Project, stage: &'static str, inputs: &[String]) -> impl Fn(String) -> PipelineError {
    let digest = project.inputs_digest(inputs);
    move |message| PipelineError::Stage {
        stage,
        input_hash: digest.clone(),
        message,
    }
}

pub fn plot_of<'a>(project: &'a Project, plot: &str) -> Result<&'a Plot, PipelineError> {
    project
        .config
        .plot(plot)
        .ok_or_else(|| PipelineError::NotFound(format!("plot {plot}")))
}

/// Plot-treatments with ingested sap-flow data, restricted to configured
/// plots and treatments.
pub fn plot_treatments(project: &Project) -> Result<Vec<(String, Treatment)>, PipelineError> {
    let dir = project.path(SAPFLOW_DIR);
    let mut out = BTreeSet::new();
    if let Ok(entries) = std::fs::read_dir(&dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some((plot, t)) = name.rsplit_once('_') {
                if let Ok(t) = t.parse::<Treatment>() {
                    if project.config.plot(plot).is_some() && project.config.treatments.contains(&t) {
                        out.insert((plot.to_string(), t));
                    }
                }
            }
        }
    }
    Ok(out.into_iter().collect())
}

fn sensor_files(project: &Project, plot: &str, t: Treatment) -> Vec<String> {
    let dir = format!("{SAPFLOW_DIR}/{}", stem(plot, t));
    let mut files: Vec<String> = std::fs::read_dir(project.path(&dir))
        .map(|rd| {
            rd.flatten()
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".csv"))
                .map(|n| format!("{dir}/{n}"))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

// ---------------------------------------------------------------- meteo

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IncompleteDays {
    site: String,
    origin: NaiveDate,
    incomplete: Vec<vinestress::meteo::IncompleteDay>,
}

/// Hourly weather of a site into daily records with thermal time.
pub fn stage_meteo(project: &Project, site: &str) -> Result<Vec<DailyMeteoRecord>, PipelineError> {
    let cfg = project
        .config
        .site(site)
        .ok_or_else(|| PipelineError::NotFound(format!("site {site}")))?;
    let input = meteo_file(site);
    let inputs = vec![input.clone(), config_key()];
    project.require_fresh(&[input.clone()])?;
    let fail = stage_err(project, "meteo", &inputs);
    let hourly: Vec<HourlyMeteoRecord> = project.read_csv(&input)?;
    let mut series = daily_from_hourly(&hourly, &cfg.meteo()).map_err(|e| fail(e.to_string()))?;
    let first = series.days.first().ok_or_else(|| fail("no complete day".into()))?.date;
    let origin = project.config.phenology.gdd_origin.unwrap_or_else(|| {
        use chrono::Datelike;
        default_gdd_origin(first.year())
    });
    assign_thermal_time(&mut series.days, origin).map_err(|e| fail(e.to_string()))?;
    project.write_csv(&dailies_file(site), &series.days, "meteo", &inputs)?;
    let incomplete = IncompleteDays {
        site: site.to_string(),
        origin,
        incomplete: series.incomplete,
    };
    project.write_json(&incomplete_days_file(site), &incomplete, "meteo", &inputs)?;
    Ok(series.days)
}

pub fn load_dailies(project: &Project, site: &str) -> Result<Vec<DailyMeteoRecord>, PipelineError> {
    let rel = dailies_file(site);
    project.require_fresh(&[rel.clone()])?;
    project.read_csv(&rel)
}

// -------------------------------------------------------------- sapflow

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorQc {
    pub sensor_id: String,
    pub reliable: bool,
    pub daytime_records: usize,
    pub filtered_records: usize,
    pub filtered_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranspirationRow {
    pub date: NaiveDate,
    pub plot_id: String,
    pub treatment: Treatment,
    pub t_mm_per_day: Option<f64>,
    pub smoothed: bool,
}

/// QC, scaling, daily sums and smoothing for one plot-treatment.
pub fn stage_sapflow(project: &Project, plot: &str, t: Treatment) -> Result<TranspirationSeries, PipelineError> {
    let p = plot_of(project, plot)?;
    let files = sensor_files(project, plot, t);
    if files.is_empty() {
        return Err(PipelineError::NotFound(format!("sap-flow data for {plot}/{t}")));
    }
    let met = meteo_file(&p.site);
    let mut fresh = files.clone();
    fresh.push(met.clone());
    project.require_fresh(&fresh)?;
    let mut inputs = fresh;
    inputs.push(config_key());
    let fail = stage_err(project, "sapflow", &inputs);

    let hourly: Vec<HourlyMeteoRecord> = project.read_csv(&met)?;
    let radiation: BTreeMap<NaiveDateTime, f64> = hourly.iter().map(|h| (h.timestamp, h.solar_radiation)).collect();
    let mut outcomes = Vec::new();
    let mut qc = Vec::new();
    for f in &files {
        let rows: Vec<SapRow> = project.read_csv(f)?;
        let Some(first) = rows.first() else { continue };
        let mut stream = SensorStream::new(first.sensor_id.clone(), plot, t);
        stream.leaf_area_coef = project.config.leaf_area.get(&first.sensor_id).copied().unwrap_or(1.0);
        for r in &rows {
            stream.push(r.timestamp, r.rate_g_per_h);
        }
        let o = qc_sensor(&stream, &project.config.qc, &radiation).map_err(|e| fail(e.to_string()))?;
        qc.push(SensorQc {
            sensor_id: o.stream.sensor_id.clone(),
            reliable: o.reliable,
            daytime_records: o.daytime_records,
            filtered_records: o.filtered_records,
            filtered_fraction: o.filtered_fraction(),
        });
        outcomes.push(o);
    }
    project.write_json(&qc_file(plot, t), &qc, "sapflow", &inputs)?;
    let raw = daily_transpiration(&outcomes, p.ground_area_m2).map_err(|e| fail(e.to_string()))?;
    let smooth = smooth_ma(&raw, project.config.kstar.smoothing_window).map_err(|e| fail(e.to_string()))?;
    let rows: Vec<TranspirationRow> = [&raw, &smooth]
        .iter()
        .flat_map(|s| {
            s.daily.iter().map(|d| TranspirationRow {
                date: d.date,
                plot_id: plot.to_string(),
                treatment: t,
                t_mm_per_day: d.t_mm,
                smoothed: s.smoothed,
            })
        })
        .collect();
    project.write_csv(&transpiration_file(plot, t), &rows, "sapflow", &inputs)?;
    Ok(smooth)
}

/// The smoothed transpiration series of a plot-treatment.
pub fn load_transpiration(project: &Project, plot: &str, t: Treatment) -> Result<TranspirationSeries, PipelineError> {
    let rel = transpiration_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    let rows: Vec<TranspirationRow> = project.read_csv(&rel)?;
    Ok(TranspirationSeries {
        plot_id: plot.to_string(),
        treatment: t,
        daily: rows
            .into_iter()
            .filter(|r| r.smoothed)
            .map(|r| DailyTranspiration {
                date: r.date,
                t_mm: r.t_mm_per_day,
            })
            .collect(),
        smoothed: true,
    })
}

// ------------------------------------------------------------ phenology

fn fruit_for(project: &Project, plot: &str, t: Treatment) -> Result<Vec<FruitSample>, PipelineError> {
    if !project.exists(FRUIT_FILE) {
        return Ok(Vec::new());
    }
    let all: Vec<FruitSample> = project.read_csv(FRUIT_FILE)?;
    Ok(all.into_iter().filter(|s| s.plot_id == plot && s.treatment == t).collect())
}

pub fn lwp_for(project: &Project, plot: &str, t: Treatment) -> Result<Vec<LwpRecord>, PipelineError> {
    if !project.exists(LWP_FILE) {
        return Ok(Vec::new());
    }
    let all: Vec<LwpRecord> = project.read_csv(LWP_FILE)?;
    Ok(all.into_iter().filter(|s| s.plot_id == plot && s.treatment == t).collect())
}

/// Calendar of one plot-treatment: observed stages stamped with thermal
/// time, missing stages derived by shift rules, maturity from the fruit
/// samples, then checked against the knowledge base ordering.
pub fn stage_calendar(project: &Project, plot: &str, t: Treatment) -> Result<PhenologyCalendar, PipelineError> {
    let p = plot_of(project, plot)?;
    let daily = dailies_file(&p.site);
    let mut fresh = vec![PHENOLOGY_FILE.to_string(), daily.clone()];
    if project.exists(FRUIT_FILE) {
        fresh.push(FRUIT_FILE.into());
    }
    project.require_fresh(&fresh)?;
    let mut inputs = fresh;
    inputs.push(config_key());
    inputs.push(project.knowledge_key().to_string());
    let fail = stage_err(project, "phenology", &inputs);

    let dailies: Vec<DailyMeteoRecord> = project.read_csv(&daily)?;
    let rows: Vec<PhenologyRow> = project.read_csv(PHENOLOGY_FILE)?;
    let mut cal = PhenologyCalendar::new(plot);
    for r in rows.iter().filter(|r| r.plot_id == plot) {
        cal.set(r.stage, r.date, None);
    }
    let uncovered = cal.stamp_thermal_time(&dailies);
    if !uncovered.is_empty() {
        return Err(fail(format!("stages outside the weather record: {uncovered:?}")));
    }
    let gdd: Vec<(NaiveDate, f64)> = dailies.iter().map(|d| (d.date, d.gdd_cum)).collect();
    for target in Stage::ALL {
        if cal.date(target).is_some() {
            continue;
        }
        let Some(rule) = project
            .kb
            .shift_rule_for(target, Some(&p.variety), project.config.phenology.shift_offset_gdd)
        else {
            continue;
        };
        if cal.date(rule.source).is_some() {
            cal = apply_shift(&rule, &cal, &gdd).map_err(|e| fail(e.to_string()))?;
        }
    }
    if let Some(threshold) = project.config.maturity.threshold(&p.variety) {
        let samples = fruit_for(project, plot, t)?;
        if !samples.is_empty() {
            cal.stages.remove(&Stage::Maturity);
            if let Some(d) = maturity_date(&samples, threshold).map_err(|e| fail(e.to_string()))? {
                let g = gdd
                    .binary_search_by_key(&d, |x| x.0)
                    .map(|i| gdd[i].1)
                    .map_err(|_| fail(format!("maturity date {d} outside the weather record")))?;
                cal.set(Stage::Maturity, d, Some(g));
            }
        }
    }
    let order = project.kb.check_temporal_order(&cal);
    if !order.is_consistent() {
        let v: Vec<String> = order
            .violations
            .iter()
            .map(|v| format!("{} ({}) is not before {} ({})", v.before, v.before_date, v.after, v.after_date))
            .collect();
        return Err(PipelineError::Validation(format!(
            "phenology of {plot}/{t} contradicts the knowledge base: {}",
            v.join("; ")
        )));
    }
    project.write_json(&calendar_file(plot, t), &cal, "phenology", &inputs)?;
    Ok(cal)
}

pub fn load_calendar(project: &Project, plot: &str, t: Treatment) -> Result<PhenologyCalendar, PipelineError> {
    let rel = calendar_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    project.read_json(&rel)
}

// ----------------------------------------------------------- candidates

/// Everything the review client shows besides the curve itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub plot_id: String,
    pub treatment: Treatment,
    pub rules: CandidateRuleConfig,
    pub budbreak: NaiveDate,
    pub veraison: NaiveDate,
    pub first_lwp_stress: Option<NaiveDate>,
    /// Days of the phenology window failing the heat-spike rule.
    pub vpd_excluded: Vec<NaiveDate>,
    pub survivors: BTreeMap<Rule, usize>,
    pub eliminated_by: Option<Rule>,
}

pub fn rule_config(project: &Project, plot: &Plot) -> CandidateRuleConfig {
    let region = project.config.site(&plot.site).and_then(|s| s.region.as_deref());
    let mut cfg = CandidateRuleConfig::from_kb(&project.kb, region, Some(&plot.variety));
    let k = &project.config.kstar;
    if let Some(v) = k.vpd_limit {
        cfg.vpd_limit = v;
    }
    if let Some(v) = k.derivative_epsilon {
        cfg.derivative_epsilon = v;
    }
    if let Some(v) = k.lwp_stress_level {
        cfg.lwp_stress_level = v;
    }
    cfg.vpd_statistic = k.vpd_statistic;
    cfg
}

/// Ratio curve and rule-based breakpoint candidates.
pub fn stage_candidates(project: &Project, plot: &str, t: Treatment) -> Result<Detection, PipelineError> {
    let p = plot_of(project, plot)?;
    let mut fresh = vec![transpiration_file(plot, t), dailies_file(&p.site), calendar_file(plot, t)];
    if project.exists(LWP_FILE) {
        fresh.push(LWP_FILE.into());
    }
    project.require_fresh(&fresh)?;
    let mut inputs = fresh;
    inputs.push(config_key());
    inputs.push(project.knowledge_key().to_string());
    let fail = stage_err(project, "candidates", &inputs);

    let ts = load_transpiration(project, plot, t)?;
    let dailies = load_dailies(project, &p.site)?;
    let cal = load_calendar(project, plot, t)?;
    let lwp = lwp_for(project, plot, t)?;
    let cfg = rule_config(project, p);
    let ratio = compute_ratio(&ts, &dailies).map_err(|e| fail(e.to_string()))?;
    let det = detect_candidates(&ratio, &cal, &lwp, &dailies, &cfg, &project.kb).map_err(|e| fail(e.to_string()))?;
    let budbreak = cal.date(Stage::Budbreak).expect("checked by detection");
    let veraison = cal.date(Stage::Veraison).expect("checked by detection");
    let diag = Diagnostics {
        plot_id: plot.to_string(),
        treatment: t,
        rules: cfg,
        budbreak,
        veraison,
        first_lwp_stress: first_stress_date(&lwp, cfg.lwp_stress_level),
        vpd_excluded: heat_spike_days(&dailies, budbreak, veraison, cfg.vpd_limit, cfg.vpd_statistic),
        survivors: det.survivors.clone(),
        eliminated_by: det.eliminated_by,
    };
    project.write_json(&ratio_file(plot, t), &ratio, "candidates", &inputs)?;
    project.write_json(&candidates_file(plot, t), &det.candidates, "candidates", &inputs)?;
    project.write_json(&diagnostics_file(plot, t), &diag, "candidates", &inputs)?;
    Ok(det)
}

pub fn load_candidates(project: &Project, plot: &str, t: Treatment) -> Result<Vec<Candidate>, PipelineError> {
    let rel = candidates_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    project.read_json(&rel)
}

pub fn load_ratio(project: &Project, plot: &str, t: Treatment) -> Result<RatioSeries, PipelineError> {
    let rel = ratio_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    project.read_json(&rel)
}

pub fn load_diagnostics(project: &Project, plot: &str, t: Treatment) -> Result<Diagnostics, PipelineError> {
    let rel = diagnostics_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    project.read_json(&rel)
}

// ------------------------------------------------------------ selection

/// A committed breakpoint choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub plot_id: String,
    pub treatment: Treatment,
    pub t_kstar: NaiveDate,
    pub gdd_cum: f64,
    pub k_star: f64,
    pub mode: SelectionMode,
    /// 1-based position in the candidate list, when chosen from it.
    pub candidate_index: Option<usize>,
    pub author: String,
    /// RFC 3339 commit time.
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SelectionRequest {
    Index { index: usize },
    Explicit { t_kstar: NaiveDate, k_star: f64 },
}

pub fn load_selection(project: &Project, plot: &str, t: Treatment) -> Result<Option<SelectionRecord>, PipelineError> {
    let rel = selection_file(plot, t);
    if !project.exists(&rel) {
        return Ok(None);
    }
    project.read_json(&rel).map(Some)
}

/// Resolve a request against the current candidates and weather.
pub fn resolve_selection(
    project: &Project,
    plot: &str,
    t: Treatment,
    request: SelectionRequest,
) -> Result<(KstarSelection, Option<usize>), PipelineError> {
    let p = plot_of(project, plot)?;
    match request {
        SelectionRequest::Index { index } => {
            let candidates = load_candidates(project, plot, t)?;
            let sel = select_kstar(&candidates, Choice::Index(index)).map_err(|e| PipelineError::Validation(e.to_string()))?;
            Ok((sel, Some(index)))
        }
        SelectionRequest::Explicit { t_kstar, k_star } => {
            if !(k_star > 0.0 && k_star.is_finite()) {
                return Err(PipelineError::Validation(format!("K* must be positive, got {k_star}")));
            }
            let dailies = load_dailies(project, &p.site)?;
            let d = dailies
                .iter()
                .find(|d| d.date == t_kstar)
                .ok_or_else(|| PipelineError::Validation(format!("{t_kstar} is not covered by the weather record")))?;
            Ok((
                KstarSelection {
                    t_kstar,
                    gdd_cum: d.gdd_cum,
                    k_star,
                },
                None,
            ))
        }
    }
}

/// Persist a manual selection. An existing one is only replaced with
/// `force`.
pub fn commit_selection(
    project: &Project,
    plot: &str,
    t: Treatment,
    request: SelectionRequest,
    author: &str,
    force: bool,
    timestamp: &str,
) -> Result<SelectionRecord, PipelineError> {
    if author.trim().is_empty() {
        return Err(PipelineError::Validation("author must not be empty".into()));
    }
    let rel = selection_file(plot, t);
    if project.exists(&rel) && !force {
        return Err(PipelineError::Conflict {
            plot: plot.to_string(),
            treatment: t,
        });
    }
    let (sel, index) = resolve_selection(project, plot, t, request)?;
    let cal = load_calendar(project, plot, t)?;
    build_kcb(&sel, &cal, project.config.kstar.k0).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let record = SelectionRecord {
        plot_id: plot.to_string(),
        treatment: t,
        t_kstar: sel.t_kstar,
        gdd_cum: sel.gdd_cum,
        k_star: sel.k_star,
        mode: SelectionMode::Manual,
        candidate_index: index,
        author: author.to_string(),
        timestamp: timestamp.to_string(),
    };
    let inputs = if index.is_some() { vec![candidates_file(plot, t)] } else { vec![] };
    project.write_json(&rel, &record, "selection", &inputs)?;
    project.save_manifest()?;
    Ok(record)
}

// ------------------------------------------------------------------- Ks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Use a committed selection, else the automatic policy.
    Auto,
    /// Use a committed selection, else stop and wait for one.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcbArtifact {
    pub curve: KcbCurve,
    pub mode: SelectionMode,
    pub candidate_index: Option<usize>,
}

/// KcB and Ks from a selection; nothing is written.
pub fn ks_from_selection(
    project: &Project,
    plot: &str,
    t: Treatment,
    sel: &KstarSelection,
) -> Result<(KcbCurve, KsSeries), PipelineError> {
    let p = plot_of(project, plot)?;
    let ts = load_transpiration(project, plot, t)?;
    let dailies = load_dailies(project, &p.site)?;
    let cal = load_calendar(project, plot, t)?;
    let kcb = build_kcb(sel, &cal, project.config.kstar.k0).map_err(|e| PipelineError::Validation(e.to_string()))?;
    Ok((kcb, compute_ks(&ts, &kcb, &dailies, project.config.kstar.ks_cap)))
}

/// `Ok(None)` when the mode is pending and no selection is committed.
pub fn stage_ks(project: &Project, plot: &str, t: Treatment, mode: RunMode) -> Result<Option<KsSeries>, PipelineError> {
    let p = plot_of(project, plot)?;
    let committed = load_selection(project, plot, t)?;
    let mut fresh = vec![transpiration_file(plot, t), dailies_file(&p.site), calendar_file(plot, t)];
    let (sel, sel_mode, index) = match &committed {
        Some(s) => {
            fresh.push(selection_file(plot, t));
            (
                KstarSelection {
                    t_kstar: s.t_kstar,
                    gdd_cum: s.gdd_cum,
                    k_star: s.k_star,
                },
                SelectionMode::Manual,
                s.candidate_index,
            )
        }
        None if mode == RunMode::Pending => return Ok(None),
        None => {
            fresh.push(candidates_file(plot, t));
            let candidates = load_candidates(project, plot, t)?;
            let sel = select_kstar(&candidates, Choice::Auto).map_err(|e| {
                stage_err(project, "ks", &fresh)(format!("{e} for {plot}/{t}"))
            })?;
            (sel, SelectionMode::Auto, None)
        }
    };
    project.require_fresh(&fresh)?;
    let mut inputs = fresh;
    inputs.push(config_key());
    let (kcb, ks) = ks_from_selection(project, plot, t, &sel)?;
    let art = KcbArtifact {
        curve: kcb,
        mode: sel_mode,
        candidate_index: index,
    };
    project.write_json(&kcb_file(plot, t), &art, "ks", &inputs)?;
    project.write_csv(&ks_file(plot, t), &ks.points, "ks", &inputs)?;
    Ok(Some(ks))
}

pub fn load_ks(project: &Project, plot: &str, t: Treatment) -> Result<KsSeries, PipelineError> {
    let rel = ks_file(plot, t);
    project.require_fresh(&[rel.clone()])?;
    let points: Vec<KsPoint> = project.read_csv(&rel)?;
    Ok(KsSeries {
        plot_id: plot.to_string(),
        treatment: t,
        points,
    })
}

// ----------------------------------------------------------- aggregates

/// Window integrals for every plot-treatment with a Ks series.
pub fn stage_aggregate(project: &Project) -> Result<Vec<(String, AggregateRecord)>, PipelineError> {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut inputs = vec![config_key()];
    for (plot, t) in plot_treatments(project)? {
        if !project.exists(&ks_file(&plot, t)) {
            continue;
        }
        inputs.push(ks_file(&plot, t));
        inputs.push(calendar_file(&plot, t));
        let p = plot_of(project, &plot)?;
        let ks = load_ks(project, &plot, t)?;
        let cal = load_calendar(project, &plot, t)?;
        let rec = build_aggregates(&ks, &cal)
            .map_err(|e| stage_err(project, "aggregate", &[ks_file(&plot, t)])(format!("{plot}/{t}: {e}")))?;
        rows.push(AggregateRow::from_record(&rec, &p.site, &p.variety));
        out.push((plot, rec));
    }
    if out.is_empty() {
        return Err(PipelineError::NotFound("no Ks series to aggregate".into()));
    }
    project.write_csv(AGGREGATES_FILE, &rows, "aggregate", &inputs)?;
    Ok(out)
}

// --------------------------------------------------------------- models

fn response_value(s: &FruitSample, name: &str) -> Option<f64> {
    match name {
        "berry_weight" => Some(s.berry_weight),
        "sugar" => Some(s.sugar),
        "acidity" => Some(s.acidity),
        "sugar_acidity" => (s.acidity > 0.0).then(|| s.sugar / s.acidity),
        "anthocyanins" => s.anthocyanins,
        "assimilable_nitrogen" => s.assimilable_nitrogen,
        _ => None,
    }
}

pub const RESPONSES: [&str; 6] = [
    "berry_weight",
    "sugar",
    "acidity",
    "sugar_acidity",
    "anthocyanins",
    "assimilable_nitrogen",
];

/// Last fruit sample of each plot-treatment.
fn final_samples(project: &Project) -> Result<BTreeMap<(String, Treatment), FruitSample>, PipelineError> {
    if !project.exists(FRUIT_FILE) {
        return Ok(BTreeMap::new());
    }
    let all: Vec<FruitSample> = project.read_csv(FRUIT_FILE)?;
    let mut out: BTreeMap<(String, Treatment), FruitSample> = BTreeMap::new();
    for s in all {
        let key = (s.plot_id.clone(), s.treatment);
        match out.get(&key) {
            Some(prev) if prev.date >= s.date => {}
            _ => {
                out.insert(key, s);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlrtiSummary {
    pub response: String,
    pub n: usize,
    pub sigma: f64,
    pub omega: f64,
    pub cv_error: f64,
    pub zero_fraction: f64,
    pub permutation_p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub response: String,
    pub n: usize,
    pub leaves: usize,
    pub root_variable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelsSummary {
    pub seed: u64,
    pub trees: Vec<TreeSummary>,
    pub flrti: Vec<FlrtiSummary>,
}

pub fn tree_file(response: &str) -> String {
    format!("derived/models/tree_{response}.json")
}
pub fn tree_text_file(response: &str) -> String {
    format!("derived/models/tree_{response}.txt")
}
pub fn flrti_file(response: &str) -> String {
    format!("derived/models/flrti_{response}.json")
}
pub fn flrti_beta_file(response: &str) -> String {
    format!("derived/models/flrti_{response}_beta.csv")
}
pub fn flrti_cv_file(response: &str) -> String {
    format!("derived/models/flrti_{response}_cv.json")
}

struct ModelInputs {
    keys: Vec<(String, Treatment)>,
    records: Vec<AggregateRecord>,
    finals: BTreeMap<(String, Treatment), FruitSample>,
    inputs: Vec<String>,
}

fn model_inputs(project: &Project) -> Result<ModelInputs, PipelineError> {
    let mut fresh = vec![AGGREGATES_FILE.to_string(), FRUIT_FILE.to_string()];
    let mut keys = Vec::new();
    for (plot, t) in plot_treatments(project)? {
        if project.exists(&ks_file(&plot, t)) {
            fresh.push(ks_file(&plot, t));
            fresh.push(calendar_file(&plot, t));
            keys.push((plot, t));
        }
    }
    if !project.exists(FRUIT_FILE) {
        return Err(PipelineError::NotFound("fruit samples (ingest fruit first)".into()));
    }
    project.require_fresh(&fresh)?;
    let mut records = Vec::new();
    for (plot, t) in &keys {
        let ks = load_ks(project, plot, *t)?;
        let cal = load_calendar(project, plot, *t)?;
        records.push(build_aggregates(&ks, &cal).map_err(|e| PipelineError::Validation(e.to_string()))?);
    }
    let mut inputs = fresh;
    inputs.push(config_key());
    Ok(ModelInputs {
        keys,
        records,
        finals: final_samples(project)?,
        inputs,
    })
}

fn responses(project: &Project) -> Result<Vec<String>, PipelineError> {
    let r = project.config.models.responses.clone();
    if let Some(bad) = r.iter().find(|x| !RESPONSES.contains(&x.as_str())) {
        return Err(PipelineError::Validation(format!(
            "unknown response '{bad}' (expected one of {})",
            RESPONSES.join(", ")
        )));
    }
    Ok(r)
}

/// Regression trees of each fruit response on the window integrals and
/// the variety.
pub fn stage_tree(project: &Project) -> Result<Vec<(TreeSummary, RegressionTree)>, PipelineError> {
    let mi = model_inputs(project)?;
    let mut out = Vec::new();
    for response in responses(project)? {
        let fail = stage_err(project, "tree", &mi.inputs);
        let mut cols: [Vec<f64>; 3] = Default::default();
        let mut variety = Vec::new();
        let mut y = Vec::new();
        for ((plot, t), rec) in mi.keys.iter().zip(&mi.records) {
            let Some(v) = mi.finals.get(&(plot.clone(), *t)).and_then(|s| response_value(s, &response)) else {
                continue;
            };
            cols[0].push(rec.nou_ver);
            cols[1].push(rec.ver_harv);
            cols[2].push(rec.nou_harv);
            variety.push(plot_of(project, plot)?.variety.clone());
            y.push(v);
        }
        let n = y.len();
        let [a, b, c] = cols;
        let data = Dataset::new(
            vec![
                Column::numeric("nou_ver", a),
                Column::numeric("ver_harv", b),
                Column::numeric("nou_harv", c),
                Column::categorical("variety", variety),
            ],
            y,
        )
        .map_err(|e| fail(format!("{response}: {e}")))?;
        let folds = project.config.models.folds.min(n);
        let tree = cart::fit(&data, &project.config.models.tree, folds, project.config.seed)
            .map_err(|e| fail(format!("{response}: {e}")))?;
        project.write_json(&tree_file(&response), &tree, "tree", &mi.inputs)?;
        project.write(&tree_text_file(&response), tree.render().as_bytes(), "tree", &mi.inputs)?;
        let root_variable = match &tree.root {
            cart::Node::Split { variable, .. } => Some(variable.clone()),
            cart::Node::Leaf { .. } => None,
        };
        out.push((
            TreeSummary {
                response,
                n,
                leaves: tree.root.leaves(),
                root_variable,
            },
            tree,
        ));
    }
    Ok(out)
}

/// Ks curves of all plot-treatments resampled on a common thermal-time
/// grid spanning the latest nouaison to the earliest harvest.
pub fn functional_curves(project: &Project, keys: &[(String, Treatment)]) -> Result<(Vec<f64>, Vec<Vec<f64>>), PipelineError> {
    let mut start = f64::NEG_INFINITY;
    let mut end = f64::INFINITY;
    let mut series = Vec::new();
    for (plot, t) in keys {
        let cal = load_calendar(project, plot, *t)?;
        let nou = cal.gdd(Stage::Nouaison).ok_or_else(|| {
            PipelineError::Validation(format!("{plot}/{t}: no nouaison thermal time"))
        })?;
        let harv = cal
            .gdd(Stage::Harvest)
            .ok_or_else(|| PipelineError::Validation(format!("{plot}/{t}: no harvest thermal time")))?;
        start = start.max(nou);
        end = end.min(harv);
        series.push(load_ks(project, plot, *t)?);
    }
    if !(end > start) {
        return Err(PipelineError::Validation(format!(
            "no common nouaison-harvest span across plots ({start} to {end})"
        )));
    }
    let grid = flrti::uniform_grid(start, end, project.config.models.grid_points);
    let mut curves = Vec::new();
    for (ks, (plot, t)) in series.iter().zip(keys) {
        let (g, v): (Vec<f64>, Vec<f64>) = ks.points.iter().filter_map(|p| p.ks.map(|k| (p.gdd_cum, k))).unzip();
        let x = flrti::resample(&g, &v, &grid)
            .ok_or_else(|| PipelineError::Validation(format!("{plot}/{t}: Ks does not cover the common span")))?;
        curves.push(x);
    }
    Ok((grid, curves))
}

/// Functional regression of each fruit response on the Ks curve.
pub fn stage_flrti(project: &Project) -> Result<Vec<(FlrtiSummary, FlrtiModel, CvResult)>, PipelineError> {
    let mi = model_inputs(project)?;
    let (grid, curves) = functional_curves(project, &mi.keys)?;
    let m = &project.config.models;
    let mut out = Vec::new();
    for response in responses(project)? {
        let fail = stage_err(project, "flrti", &mi.inputs);
        let samples: Vec<FunctionalSample> = mi
            .keys
            .iter()
            .zip(&curves)
            .filter_map(|(k, x)| {
                let y = mi.finals.get(k).and_then(|s| response_value(s, &response))?;
                Some(FunctionalSample { x: x.clone(), y })
            })
            .collect();
        let n = samples.len();
        let data = FunctionalData::new(grid.clone(), samples).map_err(|e| fail(format!("{response}: {e}")))?;
        let folds = m.folds.min(n);
        let (model, cv) = flrti::fit_cv(&data, &m.sigmas, &m.omegas, folds, project.config.seed, m.selector)
            .map_err(|e| fail(format!("{response}: {e}")))?;
        let p_value = if m.permutations >= 100 {
            Some(
                flrti::permutation_null_check(&data, &model, m.permutations, folds, project.config.seed)
                    .map_err(|e| fail(format!("{response}: {e}")))?,
            )
        } else {
            None
        };
        #[derive(Serialize)]
        struct BetaRow {
            gdd: f64,
            beta: f64,
        }
        let beta: Vec<BetaRow> = model
            .grid
            .iter()
            .zip(&model.beta)
            .map(|(g, b)| BetaRow { gdd: *g, beta: *b })
            .collect();
        project.write_json(&flrti_file(&response), &model, "flrti", &mi.inputs)?;
        project.write_csv(&flrti_beta_file(&response), &beta, "flrti", &mi.inputs)?;
        project.write_json(&flrti_cv_file(&response), &cv, "flrti", &mi.inputs)?;
        out.push((
            FlrtiSummary {
                response,
                n,
                sigma: model.sigma,
                omega: model.omega,
                cv_error: cv.best_error,
                zero_fraction: model.zero_fraction(),
                permutation_p_value: p_value,
            },
            model,
            cv,
        ));
    }
    Ok(out)
}

// --------------------------------------------------------------- driver

/// Per-plot chain: weather, transpiration, calendar, candidates, then Ks
/// and the window integrals unless the selection is still pending.
pub fn run_pipeline(
    project: &Project,
    plot: &str,
    t: Treatment,
    mode: RunMode,
) -> Result<Option<(KsSeries, AggregateRecord)>, PipelineError> {
    let p = plot_of(project, plot)?;
    stage_meteo(project, &p.site)?;
    let out = run_plot_from_transpiration(project, plot, t, mode);
    project.save_manifest()?;
    out
}

fn run_plot_from_transpiration(
    project: &Project,
    plot: &str,
    t: Treatment,
    mode: RunMode,
) -> Result<Option<(KsSeries, AggregateRecord)>, PipelineError> {
    stage_sapflow(project, plot, t)?;
    let cal = stage_calendar(project, plot, t)?;
    stage_candidates(project, plot, t)?;
    let Some(ks) = stage_ks(project, plot, t, mode)? else {
        return Ok(None);
    };
    let rec = build_aggregates(&ks, &cal)
        .map_err(|e| stage_err(project, "aggregate", &[ks_file(plot, t)])(format!("{plot}/{t}: {e}")))?;
    Ok(Some((ks, rec)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub completed: Vec<(String, Treatment)>,
    pub awaiting: Vec<(String, Treatment)>,
    pub candidates: BTreeMap<String, usize>,
}

/// The whole project: every plot-treatment, then the aggregate table, the
/// models and the report. Pending plot-treatments stop after their
/// candidates and the run ends with [`PipelineError::AwaitingSelection`].
pub fn run_all(project: &Project, mode: RunMode) -> Result<RunSummary, PipelineError> {
    let pts = plot_treatments(project)?;
    if pts.is_empty() {
        return Err(PipelineError::NotFound("no sap-flow data ingested".into()));
    }
    let sites: BTreeSet<String> = pts
        .iter()
        .map(|(p, _)| plot_of(project, p).map(|x| x.site.clone()))
        .collect::<Result<_, _>>()?;
    for s in &sites {
        stage_meteo(project, s)?;
    }
    let mut summary = RunSummary::default();
    for (plot, t) in &pts {
        let done = run_plot_from_transpiration(project, plot, *t, mode)?;
        let n = load_candidates(project, plot, *t)?.len();
        summary.candidates.insert(stem(plot, *t), n);
        match done {
            Some(_) => summary.completed.push((plot.clone(), *t)),
            None => summary.awaiting.push((plot.clone(), *t)),
        }
    }
    if !summary.awaiting.is_empty() {
        project.save_manifest()?;
        return Err(PipelineError::AwaitingSelection(summary.awaiting));
    }
    stage_aggregate(project)?;
    if project.exists(FRUIT_FILE) {
        let trees = stage_tree(project)?;
        let fl = stage_flrti(project)?;
        let models = ModelsSummary {
            seed: project.config.seed,
            trees: trees.into_iter().map(|(s, _)| s).collect(),
            flrti: fl.into_iter().map(|(s, _, _)| s).collect(),
        };
        project.write_json(MODELS_SUMMARY_FILE, &models, "models", &[AGGREGATES_FILE.to_string(), FRUIT_FILE.to_string()])?;
    }
    stage_report(project)?;
    project.save_manifest()?;
    Ok(summary)
}

/// Markdown overview of the current artifacts.
pub fn stage_report(project: &Project) -> Result<String, PipelineError> {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "# Vine water-deficit report\n");
    let _ = writeln!(s, "Seed: {}\n", project.config.seed);
    let _ = writeln!(s, "## Breakpoint candidates\n");
    let _ = writeln!(s, "| plot | treatment | candidates | eliminated by | selection | t_K* | K* |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|");
    for (plot, t) in plot_treatments(project)? {
        let n = load_candidates(project, &plot, t).map(|c| c.len().to_string()).unwrap_or_else(|_| "-".into());
        let elim = load_diagnostics(project, &plot, t)
            .ok()
            .and_then(|d| d.eliminated_by)
            .map(|r| r.to_string())
            .unwrap_or_else(|| "-".into());
        let (mode, tk, k) = match project.read_json::<KcbArtifact>(&kcb_file(&plot, t)) {
            Ok(a) => (
                format!("{:?}", a.mode).to_lowercase(),
                a.curve.t_kstar.to_string(),
                format!("{:.3}", a.curve.k_star),
            ),
            Err(_) => ("pending".into(), "-".into(), "-".into()),
        };
        let _ = writeln!(s, "| {plot} | {t} | {n} | {elim} | {mode} | {tk} | {k} |");
    }
    if project.exists(AGGREGATES_FILE) {
        let rows: Vec<AggregateRow> = project.read_csv(AGGREGATES_FILE)?;
        let _ = writeln!(s, "\n## Water-deficit integrals\n");
        let _ = writeln!(s, "| site | variety | treatment | NouHarv | NouVer | VerHarv | VerMat |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in rows {
            let vm = r.ver_mat.map(|v| format!("{v:.1}")).unwrap_or_else(|| "NA".into());
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} | {:.1} | {:.1} | {vm} |",
                r.site, r.variety, r.treatment, r.nou_harv, r.nou_ver, r.ver_harv
            );
        }
    }
    if project.exists(MODELS_SUMMARY_FILE) {
        let m: ModelsSummary = project.read_json(MODELS_SUMMARY_FILE)?;
        let _ = writeln!(s, "\n## Models\n");
        for t in &m.trees {
            let _ = writeln!(
                s,
                "- tree `{}` (n = {}): {} leaves, root split on {}",
                t.response,
                t.n,
                t.leaves,
                t.root_variable.as_deref().unwrap_or("none")
            );
        }
        for f in &m.flrti {
            let p = f.permutation_p_value.map(|p| format!("{p:.3}")).unwrap_or_else(|| "not run".into());
            let _ = writeln!(
                s,
                "- functional `{}` (n = {}): sigma = {}, omega = {}, CV error = {:.4}, zero fraction = {:.2}, permutation p = {p}",
                f.response, f.n, f.sigma, f.omega, f.cv_error, f.zero_fraction
            );
        }
    }
    let stale = project.stale(None);
    let _ = writeln!(s, "\n## Stale artifacts\n");
    if stale.is_empty() {
        let _ = writeln!(s, "none");
    }
    for x in stale {
        let _ = writeln!(s, "- {x}");
    }
    project.write(REPORT_FILE, s.as_bytes(), "report", &[])?;
    Ok(s)
}
