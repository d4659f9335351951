//! Season chain from the ratio to Ks.

use vinestress::knowledge::KnowledgeBase;
use vinestress::kstar::{
    build_kcb, compute_ks, compute_ratio, detect_candidates, select_kstar, CandidateRuleConfig, Choice, KcbCurve,
    KsSeries, KstarSelection, DEFAULT_KS_CAP,
};

use super::seasons::{season, Shape};

pub const K0: f64 = 0.1;

pub struct Chain {
    pub selection: KstarSelection,
    pub kcb: KcbCurve,
    pub ks: KsSeries,
}

/// Automatic selection; `None` when no date survives the rules.
pub fn run(seed: u64, shape: Shape) -> Option<Chain> {
    let s = season(seed, shape);
    let kb = KnowledgeBase::shipped_default();
    let ratio = compute_ratio(&s.transpiration, &s.dailies).unwrap();
    let det = detect_candidates(&ratio, &s.calendar, &s.lwp, &s.dailies, &CandidateRuleConfig::default(), &kb).unwrap();
    let selection = select_kstar(&det.candidates, Choice::Auto).ok()?;
    let kcb = build_kcb(&selection, &s.calendar, K0).unwrap();
    let ks = compute_ks(&s.transpiration, &kcb, &s.dailies, DEFAULT_KS_CAP);
    Some(Chain { selection, kcb, ks })
}

#[derive(Debug, Default)]
pub struct KsOutcome {
    pub clean_seasons: usize,
    pub noisy_seasons: usize,
    pub skipped: usize,
    /// Largest |Ks − 1| on the selected day of a clean season.
    pub max_err_at_kstar: f64,
    pub out_of_range: usize,
    pub continuity_breaks: usize,
}

impl KsOutcome {
    pub fn passed(&self) -> bool {
        self.clean_seasons > 0 && self.max_err_at_kstar <= 1e-9 && self.out_of_range == 0 && self.continuity_breaks == 0
    }
}

fn continuous(kcb: &KcbCurve) -> bool {
    let left = kcb.at(kcb.kstar_gdd - 1e-9 * kcb.kstar_gdd.abs().max(1.0));
    kcb.at(kcb.kstar_gdd) == kcb.k_star && (left - kcb.k_star).abs() <= 1e-9 && kcb.at(kcb.kstar_gdd + 1.0) == kcb.k_star
}

pub fn ks_checks(seeds: u64) -> KsOutcome {
    let mut out = KsOutcome::default();
    for seed in 0..seeds {
        for (shape, clean) in [(Shape::CLEAN, true), (Shape::NOISY, false)] {
            let Some(c) = run(seed, shape) else {
                out.skipped += 1;
                continue;
            };
            if clean {
                out.clean_seasons += 1;
                let at = c.ks.points.iter().find(|p| p.date == c.selection.t_kstar).and_then(|p| p.ks);
                let err = at.map_or(f64::INFINITY, |k| (k - 1.0).abs());
                out.max_err_at_kstar = out.max_err_at_kstar.max(err);
            } else {
                out.noisy_seasons += 1;
            }
            out.out_of_range += c
                .ks
                .points
                .iter()
                .filter_map(|p| p.ks)
                .filter(|k| !(0.0..=DEFAULT_KS_CAP).contains(k))
                .count();
            if !continuous(&c.kcb) {
                out.continuity_breaks += 1;
            }
        }
    }
    out
}
