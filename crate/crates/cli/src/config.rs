//! Project configuration, `vinestress.toml` at the project root.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use vinestress::cart::TreeParams;
use vinestress::flrti::{Selector, DEFAULT_FOLDS, DEFAULT_GRID_POINTS, DEFAULT_OMEGAS, DEFAULT_SIGMAS};
use vinestress::kstar::{VpdStatistic, DEFAULT_KS_CAP};
use vinestress::meteo::SiteConfig;
use vinestress::sapflow::QcRuleset;
use vinestress::Treatment;

use crate::error::PipelineError;

pub const CONFIG_FILE: &str = "vinestress.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Single source of randomness (CV folds, permutations).
    pub seed: u64,
    /// Knowledge file relative to the project root; the shipped default
    /// when absent.
    #[serde(default)]
    pub knowledge: Option<String>,
    pub sites: Vec<Site>,
    pub plots: Vec<Plot>,
    #[serde(default = "default_treatments")]
    pub treatments: Vec<Treatment>,
    #[serde(default)]
    pub qc: QcRuleset,
    /// Multiplicative leaf-area coefficient per sensor id (1 when absent).
    #[serde(default)]
    pub leaf_area: BTreeMap<String, f64>,
    #[serde(default)]
    pub kstar: KstarSettings,
    #[serde(default)]
    pub phenology: PhenologySettings,
    #[serde(default)]
    pub maturity: MaturitySettings,
    #[serde(default)]
    pub models: ModelSettings,
}

fn default_treatments() -> Vec<Treatment> {
    vec![Treatment::I0, Treatment::I1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub name: String,
    #[serde(default)]
    pub region: Option<String>,
    pub latitude: f64,
    pub longitude: f64,
    pub elevation: f64,
    #[serde(default = "default_meridian")]
    pub tz_meridian: f64,
    #[serde(default = "default_anemometer")]
    pub anemometer_height: f64,
}

fn default_meridian() -> f64 {
    15.0
}

fn default_anemometer() -> f64 {
    2.0
}

impl Site {
    pub fn meteo(&self) -> SiteConfig {
        let mut s = SiteConfig::new(self.latitude, self.longitude, self.elevation);
        s.tz_meridian_deg = self.tz_meridian;
        s.anemometer_height_m = self.anemometer_height;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plot {
    pub id: String,
    pub site: String,
    pub variety: String,
    /// Ground area per vine, m².
    pub ground_area_m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KstarSettings {
    pub ks_cap: f64,
    /// KcB at budbreak.
    pub k0: f64,
    pub smoothing_window: usize,
    /// Overrides of the knowledge-base levels.
    pub vpd_limit: Option<f64>,
    pub derivative_epsilon: Option<f64>,
    pub lwp_stress_level: Option<f64>,
    /// Daily VPD statistic of the heat-spike rule, `max` or `mean`.
    pub vpd_statistic: VpdStatistic,
}

impl Default for KstarSettings {
    fn default() -> Self {
        KstarSettings {
            ks_cap: DEFAULT_KS_CAP,
            k0: 0.0,
            smoothing_window: 5,
            vpd_limit: None,
            derivative_epsilon: None,
            lwp_stress_level: None,
            vpd_statistic: VpdStatistic::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhenologySettings {
    /// Offset used by shift rules that carry none, GDD.
    pub shift_offset_gdd: f64,
    /// Thermal-time origin; April 1st of the season when absent.
    pub gdd_origin: Option<NaiveDate>,
}

impl Default for PhenologySettings {
    fn default() -> Self {
        PhenologySettings {
            shift_offset_gdd: 100.0,
            gdd_origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MaturitySettings {
    /// Sugar/acidity threshold per variety.
    pub thresholds: BTreeMap<String, f64>,
    pub default_threshold: Option<f64>,
}

impl MaturitySettings {
    pub fn threshold(&self, variety: &str) -> Option<f64> {
        self.thresholds.get(variety).copied().or(self.default_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Fruit variables used as responses, read from the last sample.
    pub responses: Vec<String>,
    pub folds: usize,
    pub tree: TreeParams,
    pub grid_points: usize,
    pub sigmas: Vec<f64>,
    pub omegas: Vec<f64>,
    pub selector: Selector,
    pub permutations: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            responses: vec!["berry_weight".into(), "sugar".into()],
            folds: DEFAULT_FOLDS,
            tree: TreeParams::default(),
            grid_points: DEFAULT_GRID_POINTS,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            omegas: DEFAULT_OMEGAS.to_vec(),
            selector: Selector::Lasso,
            permutations: 199,
        }
    }
}

impl ProjectConfig {
    pub fn load(root: &Path) -> Result<(ProjectConfig, String), PipelineError> {
        let path = root.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ProjectConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.sites.is_empty() || self.plots.is_empty() {
            return bad("configuration needs at least one site and one plot".into());
        }
        for p in &self.plots {
            if !self.sites.iter().any(|s| s.name == p.site) {
                return bad(format!("plot {} refers to unknown site {}", p.id, p.site));
            }
            if !(p.ground_area_m2 > 0.0) {
                return bad(format!("plot {}: ground_area_m2 must be positive", p.id));
            }
            if p.id.contains(['/', '\\', '_']) || p.id.is_empty() {
                return bad(format!("plot id '{}' must be non-empty without '/', '\\' or '_'", p.id));
            }
        }
        let mut ids: Vec<&str> = self.plots.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate plot id {}", w[0]));
        }
        for s in &self.sites {
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return bad(format!("invalid site name '{}'", s.name));
            }
        }
        let k = &self.kstar;
        if !(k.ks_cap > 0.0) || k.smoothing_window < 3 || k.smoothing_window % 2 == 0 {
            return bad("kstar: ks_cap must be positive and smoothing_window odd and >= 3".into());
        }
        if self.models.folds < 2 {
            return bad("models.folds must be at least 2".into());
        }
        if self.models.grid_points < 4 {
            return bad("models.grid_points must be at least 4".into());
        }
        Ok(())
    }

    pub fn plot(&self, id: &str) -> Option<&Plot> {
        self.plots.iter().find(|p| p.id == id)
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.sites.iter().find(|s| s.name == name)
    }
}
