mod common;

use common::kb::{gdd_table, kb_checks, ordered_calendar, ymd};
use vinestress::knowledge::{apply_shift, KnowledgeBase};
use vinestress::phenology::Stage;

#[test]
fn shipped_file_loads_and_orders_the_season() {
    let o = kb_checks();
    assert!(o.loads, "{o:?}");
    assert!(o.ordered_validates, "{o:?}");
}

#[test]
fn inverted_stages_are_reported() {
    let o = kb_checks();
    assert!(o.inversion_reported, "{o:?}");
}

#[test]
fn zero_offset_shift_is_the_identity() {
    assert!(kb_checks().zero_shift_identity);
}

#[test]
fn harvest_before_veraison_names_both_stages() {
    let kb = KnowledgeBase::shipped_default();
    let cal = ordered_calendar().with(Stage::Harvest, ymd(7, 1));
    let r = kb.check_temporal_order(&cal);
    assert_eq!(r.violations.len(), 1, "{r:?}");
    assert_eq!(r.violations[0].after.to_ascii_lowercase(), "harvest");
}

#[test]
fn positive_shift_moves_nouaison_forward_in_thermal_time() {
    let kb = KnowledgeBase::shipped_default();
    let rule = kb.shift_rule_for(Stage::Nouaison, None, 100.0).unwrap();
    let gdd = gdd_table();
    let mut cal = ordered_calendar();
    let g = gdd.iter().find(|(d, _)| *d == ymd(5, 30)).unwrap().1;
    cal.set(Stage::Bloom, ymd(5, 30), Some(g));
    let shifted = apply_shift(&rule, &cal, &gdd).unwrap();
    let nou = shifted.gdd(Stage::Nouaison).unwrap();
    assert!(nou >= g + rule.offset_gdd && nou < g + rule.offset_gdd + 9.0);
    assert!(kb.check_temporal_order(&shifted).is_consistent());
}
