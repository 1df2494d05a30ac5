//! Values flowing between modules, port schemas, and log-weights.

use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A datum on a module port.
///
/// Real payloads are always finite; use the checked constructors when the
/// payload comes from outside the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Value {
    Int(i64),
    Real(f64),
    RealVector(Vec<f64>),
    IntVector(Vec<i64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Int,
    Real,
    RealVector,
    IntVector,
}

impl Value {
    pub fn real(x: f64) -> Result<Self> {
        if x.is_finite() {
            Ok(Value::Real(x))
        } else {
            Err(Error::contract(format!("non-finite real value {x}")))
        }
    }

    pub fn real_vector(xs: Vec<f64>) -> Result<Self> {
        if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
            return Err(Error::contract(format!("non-finite entry {x} in real vector")));
        }
        Ok(Value::RealVector(xs))
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int(_) => ValueKind::Int,
            Value::Real(_) => ValueKind::Real,
            Value::RealVector(_) => ValueKind::RealVector,
            Value::IntVector(_) => ValueKind::IntVector,
        }
    }

    /// Length of a vector payload; scalars report `None`.
    pub fn len(&self) -> Option<usize> {
        match self {
            Value::RealVector(v) => Some(v.len()),
            Value::IntVector(v) => Some(v.len()),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_real_vector(&self) -> Option<&[f64]> {
        match self {
            Value::RealVector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_int_vector(&self) -> Option<&[i64]> {
        match self {
            Value::IntVector(v) => Some(v),
            _ => None,
        }
    }

    pub(crate) fn is_valid(&self) -> bool {
        match self {
            Value::Real(x) => x.is_finite(),
            Value::RealVector(v) => v.iter().all(|x| x.is_finite()),
            _ => true,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn join<T: fmt::Display>(f: &mut fmt::Formatter<'_>, xs: &[T]) -> fmt::Result {
            for (i, x) in xs.iter().enumerate() {
                if i > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{x}")?;
            }
            Ok(())
        }
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
            Value::RealVector(v) => join(f, v),
            Value::IntVector(v) => join(f, v),
        }
    }
}

/// One named port of a module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortSpec {
    pub name: String,
    pub kind: ValueKind,
    /// Required length for vector ports. `None` accepts any length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
}

impl PortSpec {
    pub fn int(name: &str) -> Self {
        PortSpec { name: name.to_owned(), kind: ValueKind::Int, len: None }
    }

    pub fn real(name: &str) -> Self {
        PortSpec { name: name.to_owned(), kind: ValueKind::Real, len: None }
    }

    pub fn real_vector(name: &str, len: usize) -> Self {
        PortSpec { name: name.to_owned(), kind: ValueKind::RealVector, len: Some(len) }
    }

    pub fn int_vector(name: &str, len: usize) -> Self {
        PortSpec { name: name.to_owned(), kind: ValueKind::IntVector, len: Some(len) }
    }
}

/// Ordered list of ports. Values travel as slices in schema order; names
/// are resolved to indices once, when a network is built.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema(pub Vec<PortSpec>);

impl Schema {
    pub fn empty() -> Self {
        Schema(Vec::new())
    }

    pub fn new(ports: Vec<PortSpec>) -> Self {
        let schema = Schema(ports);
        debug_assert!(schema.names_unique(), "duplicate port names in {schema:?}");
        schema
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ports(&self) -> &[PortSpec] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|p| p.name == name)
    }

    fn names_unique(&self) -> bool {
        self.0
            .iter()
            .enumerate()
            .all(|(i, p)| self.0[..i].iter().all(|q| q.name != p.name))
    }

    /// Checks arity, kinds, vector lengths and finiteness.
    pub fn check(&self, values: &[Value], what: &str) -> Result<()> {
        if values.len() != self.0.len() {
            return Err(Error::contract(format!(
                "{what}: expected {} ports, got {}",
                self.0.len(),
                values.len()
            )));
        }
        for (port, value) in self.0.iter().zip(values) {
            if value.kind() != port.kind {
                return Err(Error::contract(format!(
                    "{what}: port `{}` expects {:?}, got {:?}",
                    port.name,
                    port.kind,
                    value.kind()
                )));
            }
            if let (Some(want), Some(got)) = (port.len, value.len()) {
                if want != got {
                    return Err(Error::contract(format!(
                        "{what}: port `{}` expects length {want}, got {got}",
                        port.name
                    )));
                }
            }
            if !value.is_valid() {
                return Err(Error::contract(format!(
                    "{what}: port `{}` carries a non-finite value",
                    port.name
                )));
            }
        }
        Ok(())
    }
}

/// Natural-log weight `log p(u,z;x) - log q(u;x,z)`.
///
/// May be `-inf` (an impossible trace) but never NaN or `+inf`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "Option<f64>", into = "Option<f64>")]
pub struct LogWeight(f64);

impl LogWeight {
    pub const ZERO: LogWeight = LogWeight(0.0);
    pub const NEG_INFINITY: LogWeight = LogWeight(f64::NEG_INFINITY);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_nan() || value == f64::INFINITY {
            Err(Error::contract(format!("invalid log-weight {value}")))
        } else {
            Ok(LogWeight(value))
        }
    }

    /// Maps NaN (e.g. from `-inf - -inf` upstream) to `-inf`.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            LogWeight::NEG_INFINITY
        } else {
            debug_assert!(value != f64::INFINITY, "log-weight overflowed to +inf");
            LogWeight(value.min(f64::MAX))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_neg_infinite(self) -> bool {
        self.0 == f64::NEG_INFINITY
    }
}

impl Add for LogWeight {
    type Output = LogWeight;

    fn add(self, rhs: LogWeight) -> LogWeight {
        // Neither side is +inf, so the sum is never NaN.
        LogWeight(self.0 + rhs.0)
    }
}

impl std::iter::Sum for LogWeight {
    fn sum<I: Iterator<Item = LogWeight>>(iter: I) -> LogWeight {
        iter.fold(LogWeight::ZERO, Add::add)
    }
}

impl fmt::Display for LogWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<Option<f64>> for LogWeight {
    type Error = Error;

    fn try_from(value: Option<f64>) -> Result<Self> {
        match value {
            Some(v) => LogWeight::new(v),
            None => Ok(LogWeight::NEG_INFINITY),
        }
    }
}

impl From<LogWeight> for Option<f64> {
    fn from(w: LogWeight) -> Self {
        w.0.is_finite().then_some(w.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn real_constructors_reject_non_finite() {
        assert!(Value::real(f64::NAN).is_err());
        assert!(Value::real(f64::INFINITY).is_err());
        assert!(Value::real_vector(vec![0.0, f64::NEG_INFINITY]).is_err());
        assert_eq!(Value::real_vector(vec![]).unwrap().len(), Some(0));
    }

    #[test]
    fn schema_check_reports_mismatches() {
        let schema = Schema::new(vec![PortSpec::int("a"), PortSpec::real_vector("b", 2)]);
        assert!(schema.check(&[Value::Int(1), Value::RealVector(vec![1.0, 2.0])], "x").is_ok());
        assert!(schema.check(&[Value::Int(1)], "x").is_err());
        assert!(schema.check(&[Value::Real(1.0), Value::RealVector(vec![1.0, 2.0])], "x").is_err());
        assert!(schema.check(&[Value::Int(1), Value::RealVector(vec![1.0])], "x").is_err());
        assert!(schema
            .check(&[Value::Int(1), Value::RealVector(vec![1.0, f64::NAN])], "x")
            .is_err());
        assert_eq!(schema.index_of("b"), Some(1));
    }

    #[test]
    fn log_weight_rejects_nan_and_pos_inf() {
        assert!(LogWeight::new(f64::NAN).is_err());
        assert!(LogWeight::new(f64::INFINITY).is_err());
        assert!(LogWeight::new(f64::NEG_INFINITY).unwrap().is_neg_infinite());
        assert!(LogWeight::saturating(f64::NAN).is_neg_infinite());
    }

    #[test]
    fn log_weight_json_maps_neg_inf_to_null() {
        let json = serde_json::to_string(&vec![LogWeight::NEG_INFINITY, LogWeight::new(-1.5).unwrap()])
            .unwrap();
        assert_eq!(json, "[null,-1.5]");
        let back: Vec<LogWeight> = serde_json::from_str(&json).unwrap();
        assert!(back[0].is_neg_infinite());
        assert_eq!(back[1].get(), -1.5);
    }

    proptest! {
        #[test]
        fn neg_infinity_is_absorbing(x in -1e300f64..1e300) {
            let w = LogWeight::new(x).unwrap();
            prop_assert!((w + LogWeight::NEG_INFINITY).is_neg_infinite());
            prop_assert!((LogWeight::NEG_INFINITY + w).is_neg_infinite());
        }
    }
}
