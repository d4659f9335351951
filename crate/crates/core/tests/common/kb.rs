//! Shipped knowledge file against simple calendars.

use chrono::{Days, NaiveDate};
use vinestress::knowledge::{apply_shift, load_kb, KnowledgeBase, DEFAULT_KNOWLEDGE};
use vinestress::phenology::{PhenologyCalendar, Stage};

pub fn ymd(m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2012, m, d).unwrap()
}

pub fn ordered_calendar() -> PhenologyCalendar {
    PhenologyCalendar::new("kb")
        .with(Stage::Budbreak, ymd(4, 10))
        .with(Stage::Bloom, ymd(5, 30))
        .with(Stage::Veraison, ymd(7, 28))
        .with(Stage::Harvest, ymd(9, 12))
}

/// Daily thermal time from April 1 with a fixed 9 °C·day increment.
pub fn gdd_table() -> Vec<(NaiveDate, f64)> {
    (0..200u64).map(|i| (ymd(4, 1) + Days::new(i), 9.0 * i as f64)).collect()
}

#[derive(Debug, Default)]
pub struct KbOutcome {
    pub loads: bool,
    pub ordered_validates: bool,
    pub inversion_reported: bool,
    pub zero_shift_identity: bool,
}

impl KbOutcome {
    pub fn passed(&self) -> bool {
        self.loads && self.ordered_validates && self.inversion_reported && self.zero_shift_identity
    }
}

pub fn kb_checks() -> KbOutcome {
    let mut out = KbOutcome::default();
    let kb = match load_kb(DEFAULT_KNOWLEDGE) {
        Ok(kb) => kb,
        Err(_) => return out,
    };
    out.loads = !kb.is_empty() && kb == KnowledgeBase::shipped_default();
    out.ordered_validates = kb.check_temporal_order(&ordered_calendar()).is_consistent();
    // veraison dated before bloom
    let inverted = ordered_calendar().with(Stage::Veraison, ymd(5, 20));
    let report = kb.check_temporal_order(&inverted);
    out.inversion_reported = report
        .violations
        .iter()
        .any(|v| v.before.eq_ignore_ascii_case("bloom") && v.after.eq_ignore_ascii_case("veraison"));
    if let Some(mut rule) = kb.shift_rule_for(Stage::Nouaison, None, 0.0) {
        rule.offset_gdd = 0.0;
        let gdd = gdd_table();
        let mut cal = ordered_calendar();
        let g = gdd.iter().find(|(d, _)| *d == ymd(5, 30)).unwrap().1;
        cal.set(Stage::Bloom, ymd(5, 30), Some(g));
        if let Ok(shifted) = apply_shift(&rule, &cal, &gdd) {
            let mut expected = cal.clone();
            expected.set(rule.target, ymd(5, 30), Some(g));
            out.zero_shift_identity = rule.source == Stage::Bloom && shifted == expected;
        }
    }
    out
}
