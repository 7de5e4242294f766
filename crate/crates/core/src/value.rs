//! Payloads stored at tree nodes.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::path::validate_segment;

/// Largest magnitude below which integral numbers are rendered without a fraction.
const EXACT_INTEGER_LIMIT: f64 = 9_007_199_254_740_992.0;

pub type Children = BTreeMap<String, Value>;

/// A node payload. Branches share structure through `Arc`, so cloning a whole
/// tree to take a read snapshot is cheap.
#[derive(Debug, Clone)]
pub enum Value {
    Bool(bool),
    Number(f64),
    Text(String),
    Branch(Arc<Children>),
}

impl Value {
    pub fn branch<I, K>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, Value)>,
        K: Into<String>,
    {
        Value::Branch(Arc::new(
            entries.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        ))
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_branch(&self) -> Option<&Children> {
        match self {
            Value::Branch(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self, Value::Branch(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::Text(_) => "text",
            Value::Branch(_) => "branch",
        }
    }

    /// First non-finite number anywhere in the value, if any.
    pub fn find_non_finite(&self) -> Option<f64> {
        match self {
            Value::Number(n) if !n.is_finite() => Some(*n),
            Value::Branch(children) => children.values().find_map(Value::find_non_finite),
            _ => None,
        }
    }

    /// Drops empty branches bottom-up. Returns `None` if nothing is left.
    pub fn pruned(self) -> Option<Value> {
        match self {
            Value::Branch(children) => {
                let children = Arc::try_unwrap(children).unwrap_or_else(|a| (*a).clone());
                let kept: Children = children
                    .into_iter()
                    .filter_map(|(k, v)| v.pruned().map(|v| (k, v)))
                    .collect();
                (!kept.is_empty()).then(|| Value::Branch(Arc::new(kept)))
            }
            other => Some(other),
        }
    }

    /// Visits every scalar leaf with its path relative to this value.
    pub fn for_each_leaf<'a>(&'a self, prefix: &mut Vec<&'a str>, f: &mut dyn FnMut(&[&'a str], &'a Value)) {
        match self {
            Value::Branch(children) => {
                for (k, v) in children.iter() {
                    prefix.push(k);
                    v.for_each_leaf(prefix, f);
                    prefix.pop();
                }
            }
            leaf => f(prefix, leaf),
        }
    }

    /// Canonical JSON text: sorted keys, shortest round-trip numbers.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("values always serialize")
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Number(a), Value::Number(b)) => a == b,
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Branch(a), Value::Branch(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_json())
    }
}

pub(crate) fn serialize_number<S: Serializer>(n: f64, serializer: S) -> Result<S::Ok, S::Error> {
    if n.fract() == 0.0 && n.abs() < EXACT_INTEGER_LIMIT {
        serializer.serialize_i64(n as i64)
    } else {
        serializer.serialize_f64(n)
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Number(n) => serialize_number(*n, serializer),
            Value::Text(s) => serializer.serialize_str(s),
            Value::Branch(children) => {
                let mut map = serializer.serialize_map(Some(children.len()))?;
                for (k, v) in children.iter() {
                    map.serialize_entry(k, v)?;
                }
                map.end()
            }
        }
    }
}

struct ValueVisitor;

impl<'de> Visitor<'de> for ValueVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a boolean, finite number, string or object")
    }

    fn visit_bool<E: de::Error>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Number(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
        Ok(Value::Number(v as f64))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        if !v.is_finite() {
            return Err(E::custom("non-finite number"));
        }
        Ok(Value::Number(v))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
        Ok(Value::Text(v.to_owned()))
    }

    fn visit_string<E: de::Error>(self, v: String) -> Result<Value, E> {
        Ok(Value::Text(v))
    }

    fn visit_unit<E: de::Error>(self) -> Result<Value, E> {
        Err(E::custom("null is not a storable value"))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, _seq: A) -> Result<Value, A::Error> {
        Err(de::Error::custom("arrays are not storable values"))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
        let mut children = Children::new();
        while let Some(key) = map.next_key::<String>()? {
            validate_segment(&key).map_err(de::Error::custom)?;
            if children.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key {key:?}")));
            }
            let value: Value = map.next_value()?;
            children.insert(key, value);
        }
        Ok(Value::Branch(Arc::new(children)))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(ValueVisitor)
    }
}
