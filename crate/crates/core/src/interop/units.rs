use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("unknown unit `{0}`")]
    Unknown(String),
    #[error("no conversion path from `{from}` to `{to}`")]
    NoPath { from: String, to: String },
    #[error("molar/mass conversion for `{analyte}` needs a molar mass")]
    NoMolarMass { analyte: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitDef {
    pub dimension: Dimension,
    /// Multiplier to the dimension's base unit.
    pub factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    MassConcentration,
    MolarConcentration,
    Time,
    Mass,
    Length,
    AreaDensity,
    Score,
    Dimensionless,
}

/// UCUM-style unit table: the single source of truth for which units exist
/// and how to convert between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitTable {
    pub units: BTreeMap<String, UnitDef>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    #[serde(default)]
    pub molar_masses_g_per_mol: BTreeMap<String, f64>,
}

const SHIPPED: &str = include_str!("../../fixtures/units.json");

impl UnitTable {
    /// The bundled table.
    pub fn shipped() -> &'static UnitTable {
        static TABLE: OnceLock<UnitTable> = OnceLock::new();
        TABLE.get_or_init(|| serde_json::from_str(SHIPPED).expect("shipped unit table parses"))
    }

    /// Canonical spelling, following aliases.
    pub fn canonical<'a>(&'a self, unit: &'a str) -> Option<&'a str> {
        if self.units.contains_key(unit) {
            return Some(unit);
        }
        self.aliases
            .get(unit)
            .map(String::as_str)
            .filter(|u| self.units.contains_key(*u))
    }

    pub fn is_known(&self, unit: &str) -> bool {
        self.canonical(unit).is_some()
    }

    fn def<'a>(&'a self, unit: &'a str) -> Result<(&'a str, UnitDef), UnitError> {
        let canon = self
            .canonical(unit)
            .ok_or_else(|| UnitError::Unknown(unit.to_string()))?;
        Ok((canon, self.units[canon]))
    }

    /// Conversion factor such that `value_in_to = value_in_from * factor`.
    pub fn factor(&self, from: &str, to: &str, analyte: Option<&str>) -> Result<f64, UnitError> {
        let (from_c, f) = self.def(from)?;
        let (to_c, t) = self.def(to)?;
        if from_c == to_c {
            return Ok(1.0);
        }
        use Dimension::*;
        match (f.dimension, t.dimension) {
            (a, b) if a == b => Ok(f.factor / t.factor),
            (MolarConcentration, MassConcentration) | (MassConcentration, MolarConcentration) => {
                let analyte = analyte.unwrap_or("").to_ascii_lowercase();
                let molar_mass = *self
                    .molar_masses_g_per_mol
                    .get(&analyte)
                    .ok_or(UnitError::NoMolarMass { analyte })?;
                if f.dimension == MolarConcentration {
                    // mol/L * g/mol = g/L
                    Ok(f.factor * molar_mass / t.factor)
                } else {
                    Ok(f.factor / molar_mass / t.factor)
                }
            }
            _ => Err(UnitError::NoPath {
                from: from.to_string(),
                to: to.to_string(),
            }),
        }
    }

    /// Convert a value. Same-unit conversion returns the input bit-for-bit.
    pub fn convert(
        &self,
        value: f64,
        from: &str,
        to: &str,
        analyte: Option<&str>,
    ) -> Result<f64, UnitError> {
        let (from_c, _) = self.def(from)?;
        let (to_c, _) = self.def(to)?;
        if from_c == to_c {
            return Ok(value);
        }
        Ok(value * self.factor(from, to, analyte)?)
    }
}
