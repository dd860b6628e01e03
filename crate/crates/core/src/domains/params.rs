use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::grid::{Grid, Pos};
use super::DomainSpec;
use crate::error::{Error, Result};

/// Drift below this is renormalized away; anything larger is rejected.
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(id: impl Into<String>) -> Self {
        ParamId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for ParamId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// Which part of the model a parameter edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Transition,
    Reward,
    Discount,
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamValue {
    Scalar(f64),
    Cell([usize; 2]),
    /// A categorical group; entries must sum to one.
    Categorical(Vec<f64>),
}

impl ParamValue {
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            ParamValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_cell(&self) -> Option<Pos> {
        match self {
            ParamValue::Cell([x, y]) => Some(Pos::new(*x, *y)),
            _ => None,
        }
    }

    pub fn as_categorical(&self) -> Option<&[f64]> {
        match self {
            ParamValue::Categorical(v) => Some(v),
            _ => None,
        }
    }

    fn same_shape(&self, other: &ParamValue) -> bool {
        match (self, other) {
            (ParamValue::Scalar(_), ParamValue::Scalar(_)) | (ParamValue::Cell(_), ParamValue::Cell(_)) => true,
            (ParamValue::Categorical(a), ParamValue::Categorical(b)) => a.len() == b.len(),
            _ => false,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Scalar(v) => write!(f, "{v}"),
            ParamValue::Cell([x, y]) => write!(f, "({x}, {y})"),
            ParamValue::Categorical(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamDecl {
    pub id: ParamId,
    pub kind: ParamKind,
    #[serde(default)]
    pub description: String,
    pub candidates: Vec<ParamValue>,
    pub default: ParamValue,
    /// Inclusive bounds for scalar values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl ParamDecl {
    pub(crate) fn validate(&self, grid: &Grid) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(self.error("no candidate values".into()));
        }
        self.check_value(&self.default, grid)?;
        for c in &self.candidates {
            self.check_value(c, grid)?;
        }
        if !self.candidates.contains(&self.default) {
            return Err(self.error(format!("default {} is not among the candidates", self.default)));
        }
        Ok(())
    }

    fn error(&self, reason: String) -> Error {
        Error::ParamValue {
            id: self.id.to_string(),
            reason,
        }
    }

    /// Checks a value is legal for this parameter.
    pub fn check_value(&self, value: &ParamValue, grid: &Grid) -> Result<()> {
        if !value.same_shape(&self.default) {
            return Err(self.error(format!("value {value} has the wrong shape")));
        }
        match value {
            ParamValue::Scalar(v) => {
                if !v.is_finite() {
                    return Err(self.error(format!("{v} is not finite")));
                }
                if self.kind == ParamKind::Discount && !(0.0..1.0).contains(v) {
                    return Err(self.error(format!("discount {v} outside [0, 1)")));
                }
                if let Some([lo, hi]) = self.range {
                    if *v < lo || *v > hi {
                        return Err(self.error(format!("{v} outside [{lo}, {hi}]")));
                    }
                }
            }
            ParamValue::Cell([x, y]) => {
                let p = Pos::new(*x, *y);
                if !grid.contains(p) || grid.is_blocked(p) {
                    return Err(self.error(format!("cell ({x}, {y}) is off-grid or blocked")));
                }
            }
            ParamValue::Categorical(dist) => {
                if dist.iter().any(|p| !(*p >= 0.0)) {
                    return Err(self.error(format!("group {dist:?} has a negative entry")));
                }
                let total: f64 = dist.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(self.error(format!("group {dist:?} sums to {total}, not 1")));
                }
            }
        }
        Ok(())
    }
}

/// A full or partial mapping from parameter to value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamAssignment(BTreeMap<ParamId, ParamValue>);

impl ParamAssignment {
    pub fn from_values(values: impl IntoIterator<Item = (ParamId, ParamValue)>) -> Self {
        ParamAssignment(values.into_iter().collect())
    }

    pub fn get(&self, id: &str) -> Option<&ParamValue> {
        self.0.get(id)
    }

    pub fn scalar(&self, id: &str) -> Option<f64> {
        self.get(id).and_then(ParamValue::as_scalar)
    }

    pub fn cell(&self, id: &str) -> Option<Pos> {
        self.get(id).and_then(ParamValue::as_cell)
    }

    pub fn categorical(&self, id: &str) -> Option<&[f64]> {
        self.get(id).and_then(ParamValue::as_categorical)
    }

    pub fn set(&mut self, id: ParamId, value: ParamValue) -> Option<ParamValue> {
        self.0.insert(id, value)
    }

    pub fn remove(&mut self, id: &str) -> Option<ParamValue> {
        self.0.remove(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &ParamValue)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parameters whose values differ between the two assignments.
    pub fn differing(&self, other: &ParamAssignment) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .0
            .keys()
            .chain(other.0.keys())
            .filter(|id| self.0.get(id.as_str()) != other.0.get(id.as_str()))
            .cloned()
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Copy with `overrides` applied, validated against the domain.
    pub fn with_overrides(&self, spec: &DomainSpec, overrides: BTreeMap<ParamId, ParamValue>) -> Result<Self> {
        let mut out = self.clone();
        for (id, v) in overrides {
            out.set(id, v);
        }
        out.check_against(spec)?;
        Ok(out)
    }

    /// Every domain parameter present and legal, no extras. Categorical
    /// groups within tolerance are renormalized in place.
    pub fn normalize(&mut self, spec: &DomainSpec) -> Result<()> {
        self.check_against(spec)?;
        for v in self.0.values_mut() {
            if let ParamValue::Categorical(dist) = v {
                let total: f64 = dist.iter().sum();
                dist.iter_mut().for_each(|p| *p /= total);
            }
        }
        Ok(())
    }

    pub fn check_against(&self, spec: &DomainSpec) -> Result<()> {
        for decl in spec.params() {
            let value = self
                .get(decl.id.as_str())
                .ok_or_else(|| Error::MissingParam(decl.id.to_string()))?;
            decl.check_value(value, spec.grid())?;
        }
        if let Some(extra) = self.0.keys().find(|id| spec.param(id.as_str()).is_none()) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Ok(())
    }
}

impl FromIterator<(ParamId, ParamValue)> for ParamAssignment {
    fn from_iter<T: IntoIterator<Item = (ParamId, ParamValue)>>(iter: T) -> Self {
        ParamAssignment::from_values(iter)
    }
}
