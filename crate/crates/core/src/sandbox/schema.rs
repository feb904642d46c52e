//! Column schema files.
//!
//! ```toml
//! [[column]]
//! name = "customer"
//! kind = "id"
//!
//! [[column]]
//! name = "income"
//! kind = "numeric"
//! unit = "kEUR"
//! normalize = "zscore"      # zscore | minmax | none
//! desensitize = "keep"      # keep | drop | bucketize:K
//!
//! [[column]]
//! name = "default"
//! kind = "label"
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SandboxError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Id,
    Numeric,
    Label,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Zscore,
    Minmax,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Desensitization {
    #[default]
    Keep,
    Drop,
    Bucketize(usize),
}

impl FromStr for Desensitization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keep" => Ok(Desensitization::Keep),
            "drop" => Ok(Desensitization::Drop),
            _ => {
                let k = s
                    .strip_prefix("bucketize:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| format!("unknown desensitization {s:?}; expected keep, drop or bucketize:K"))?;
                if k < 2 {
                    return Err(format!("bucketize needs at least 2 buckets, got {k}"));
                }
                Ok(Desensitization::Bucketize(k))
            }
        }
    }
}

impl TryFrom<String> for Desensitization {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Desensitization> for String {
    fn from(d: Desensitization) -> String {
        d.to_string()
    }
}

impl fmt::Display for Desensitization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Desensitization::Keep => f.write_str("keep"),
            Desensitization::Drop => f.write_str("drop"),
            Desensitization::Bucketize(k) => write!(f, "bucketize:{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub unit: Option<String>,
    #[serde(default)]
    pub normalize: Normalization,
    #[serde(default)]
    pub desensitize: Desensitization,
    /// Declared value range; needed wherever encrypted sums must be
    /// checked for fixed-point overflow.
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl ColumnSpec {
    pub fn numeric(name: &str, normalize: Normalization) -> Self {
        Self { name: name.into(), kind: ColumnKind::Numeric, unit: None, normalize, desensitize: Desensitization::Keep, min: None, max: None }
    }

    pub fn with_bounds(mut self, min: f64, max: f64) -> Self {
        self.min = Some(min);
        self.max = Some(max);
        self
    }

    /// Largest absolute value allowed by the declared bounds.
    pub fn magnitude_bound(&self) -> Option<f64> {
        Some(self.min?.abs().max(self.max?.abs()))
    }

    pub fn id(name: &str) -> Self {
        Self { kind: ColumnKind::Id, ..Self::numeric(name, Normalization::None) }
    }

    pub fn label(name: &str) -> Self {
        Self { kind: ColumnKind::Label, ..Self::numeric(name, Normalization::None) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(rename = "column")]
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self, SandboxError> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, SandboxError> {
        let s: Schema = toml::from_str(text).map_err(|e| SandboxError::Schema(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        let ids = self.columns.iter().filter(|c| c.kind == ColumnKind::Id).count();
        if ids != 1 {
            return Err(SandboxError::Schema(format!("exactly one id column required, found {ids}")));
        }
        if self.columns.iter().filter(|c| c.kind == ColumnKind::Label).count() > 1 {
            return Err(SandboxError::Schema("at most one label column allowed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(SandboxError::Schema(format!("column {:?} declared twice", c.name)));
            }
            match (c.min, c.max) {
                (Some(lo), Some(hi)) if !(lo <= hi) => {
                    return Err(SandboxError::Schema(format!("column {:?} has min > max", c.name)));
                }
                (Some(_), None) | (None, Some(_)) => {
                    return Err(SandboxError::Schema(format!("column {:?} declares only one bound", c.name)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn id_column(&self) -> &ColumnSpec {
        self.columns.iter().find(|c| c.kind == ColumnKind::Id).expect("validated schema has an id column")
    }

    pub fn label_column(&self) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.kind == ColumnKind::Label)
    }

    pub fn numeric_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind == ColumnKind::Numeric)
    }

    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_schema() {
        let s = Schema::parse(
            r#"
            [[column]]
            name = "id"
            kind = "id"
            [[column]]
            name = "age"
            kind = "numeric"
            unit = "years"
            normalize = "minmax"
            desensitize = "bucketize:5"
            min = 0
            max = 120
            [[column]]
            name = "y"
            kind = "label"
            "#,
        )
        .unwrap();
        assert_eq!(s.columns.len(), 3);
        assert_eq!(s.columns[1].desensitize, Desensitization::Bucketize(5));
        assert_eq!(s.columns[1].unit.as_deref(), Some("years"));
        assert_eq!(s.columns[1].magnitude_bound(), Some(120.0));
        assert_eq!(s.label_column().unwrap().name, "y");
    }

    #[test]
    fn rejects_bad_schemas() {
        assert!(Schema::parse("[[column]]\nname = \"x\"\nkind = \"numeric\"\n").is_err());
        assert!(Schema::parse("[[column]]\nname = \"i\"\nkind = \"id\"\n[[column]]\nname = \"x\"\nkind = \"numeric\"\ndesensitize = \"blur\"\n").is_err());
        assert!("bucketize:1".parse::<Desensitization>().is_err());
    }
}
