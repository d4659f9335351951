//! Vine water-deficit software sensor.
//!
//! The crate turns hourly weather, sap-flow and phenology observations into a
//! daily water-deficit course `Ks(t)` and relates that course to berry
//! quality:
//!
//! * [`meteo`]: VPD, FAO-56 reference evapotranspiration, daily summaries, thermal time
//! * [`sapflow`]: sensor quality control, unit scaling, daily transpiration, smoothing
//! * [`knowledge`]: declarative knowledge base (concepts, subsumption, ordering, constraints)
//! * [`kstar`]: T/ETref ratio, breakpoint candidates, KcB curve and Ks
//! * [`aggregate`]: phenological-window integrals of Ks and maturity date
//! * [`cart`]: regression trees with cost-complexity pruning
//! * [`flrti`]: interpretable functional linear regression on the Ks curve

pub mod aggregate;
pub mod cart;
pub mod flrti;
pub mod knowledge;
pub mod kstar;
pub mod meteo;
pub mod phenology;
pub mod sapflow;

use serde::{Deserialize, Serialize};

/// Irrigation treatment of a plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Treatment {
    /// Not irrigated.
    I0,
    /// Irrigated.
    I1,
}

impl Treatment {
    pub fn as_str(self) -> &'static str {
        match self {
            Treatment::I0 => "i0",
            Treatment::I1 => "i1",
        }
    }
}

impl std::fmt::Display for Treatment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Treatment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "i0" | "I0" => Ok(Treatment::I0),
            "i1" | "I1" => Ok(Treatment::I1),
            other => Err(format!("unknown treatment '{other}' (expected i0 or i1)")),
        }
    }
}
