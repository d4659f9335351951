//! Phenological calendar of a plot.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::meteo::DailyMeteoRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Budbreak,
    Bloom,
    /// Fruit set.
    Nouaison,
    Veraison,
    Maturity,
    Harvest,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Budbreak,
        Stage::Bloom,
        Stage::Nouaison,
        Stage::Veraison,
        Stage::Maturity,
        Stage::Harvest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Budbreak => "budbreak",
            Stage::Bloom => "bloom",
            Stage::Nouaison => "nouaison",
            Stage::Veraison => "veraison",
            Stage::Maturity => "maturity",
            Stage::Harvest => "harvest",
        }
    }

    /// Case-insensitive lookup, also used to map knowledge-base concept names.
    pub fn from_name(name: &str) -> Option<Stage> {
        let lower = name.trim().to_ascii_lowercase();
        Stage::ALL.into_iter().find(|s| s.name() == lower)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageDate {
    pub date: NaiveDate,
    /// Thermal time at `date`, once known.
    pub gdd_cum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenologyCalendar {
    pub plot_id: String,
    pub stages: BTreeMap<Stage, StageDate>,
}

impl PhenologyCalendar {
    pub fn new(plot_id: impl Into<String>) -> Self {
        PhenologyCalendar {
            plot_id: plot_id.into(),
            stages: BTreeMap::new(),
        }
    }

    pub fn with(mut self, stage: Stage, date: NaiveDate) -> Self {
        self.set(stage, date, None);
        self
    }

    pub fn set(&mut self, stage: Stage, date: NaiveDate, gdd_cum: Option<f64>) {
        self.stages.insert(stage, StageDate { date, gdd_cum });
    }

    pub fn date(&self, stage: Stage) -> Option<NaiveDate> {
        self.stages.get(&stage).map(|s| s.date)
    }

    pub fn gdd(&self, stage: Stage) -> Option<f64> {
        self.stages.get(&stage).and_then(|s| s.gdd_cum)
    }

    /// Stamp every stage with the thermal time of its date. Returns the
    /// stages whose date is not covered by `dailies`.
    pub fn stamp_thermal_time(&mut self, dailies: &[DailyMeteoRecord]) -> Vec<Stage> {
        let mut uncovered = Vec::new();
        for (stage, sd) in self.stages.iter_mut() {
            match dailies.binary_search_by_key(&sd.date, |d| d.date) {
                Ok(i) => sd.gdd_cum = Some(dailies[i].gdd_cum),
                Err(_) => uncovered.push(*stage),
            }
        }
        uncovered
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
        assert_eq!(Stage::from_name("Veraison"), Some(Stage::Veraison));
        assert_eq!(Stage::from_name("ripening"), None);
    }

    #[test]
    fn stamping_uses_daily_thermal_time() {
        let d0 = NaiveDate::from_ymd_opt(2012, 4, 1).unwrap();
        let dailies: Vec<_> = d0
            .iter_days()
            .take(10)
            .enumerate()
            .map(|(i, date)| DailyMeteoRecord {
                date,
                t_mean: 20.0,
                t_min: 15.0,
                t_max: 25.0,
                et_ref: 4.0,
                vpd_max: 2.0,
                gdd_cum: 10.0 * (i + 1) as f64,
                vpd_mean: None,
            })
            .collect();
        let mut cal = PhenologyCalendar::new("p")
            .with(Stage::Budbreak, d0 + chrono::Days::new(2))
            .with(Stage::Harvest, d0 + chrono::Days::new(40));
        assert_eq!(cal.stamp_thermal_time(&dailies), vec![Stage::Harvest]);
        assert_eq!(cal.gdd(Stage::Budbreak), Some(30.0));
        assert_eq!(cal.gdd(Stage::Harvest), None);
    }
}
