//! Attribute values and the binary record encoding.
//!
//! A record is encoded as `[count:2]` followed by `[field_id:4][tag:1][payload]`
//! entries in ascending field-id order, so equal records always encode to
//! identical bytes. Absent fields are simply not written.

use std::collections::BTreeMap;
use std::fmt;

use base64::Engine;
use chrono::NaiveDate;

use super::schema::{FieldType, Schema};
use crate::error::{corrupt, Error, Result};
use crate::keys::{KeyBuf, KeyPart};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Date(NaiveDate),
    Blob(Vec<u8>),
    List(Vec<Value>),
    Map(BTreeMap<String, String>),
}

const T_INT: u8 = 1;
const T_FLOAT: u8 = 2;
const T_STR: u8 = 3;
const T_BOOL: u8 = 4;
const T_DATE: u8 = 5;
const T_BLOB: u8 = 6;
const T_LIST: u8 = 7;
const T_MAP: u8 = 8;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "INT",
            Value::Float(_) => "FLOAT",
            Value::Str(_) => "STRING",
            Value::Bool(_) => "BOOL",
            Value::Date(_) => "DATE",
            Value::Blob(_) => "BLOB",
            Value::List(_) => "LIST",
            Value::Map(_) => "MAP",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Order-preserving key component for scalar values.
    pub fn key_part(&self) -> Option<KeyPart> {
        Some(match self {
            Value::Int(i) => KeyPart::Int(*i),
            Value::Float(f) => KeyPart::Float(*f),
            Value::Str(s) => KeyPart::Str(s.clone()),
            Value::Bool(b) => KeyPart::Bool(*b),
            Value::Date(d) => KeyPart::Date((*d - epoch()).num_days() as i32),
            Value::Blob(b) => KeyPart::Bytes(b.clone()),
            Value::List(_) | Value::Map(_) => return None,
        })
    }

    pub fn key(&self) -> Result<Vec<u8>> {
        let part = self
            .key_part()
            .ok_or_else(|| Error::SchemaViolation(format!("{} values cannot be keys", self.type_name())))?;
        Ok(KeyBuf::new().part(&part).into_bytes())
    }

    /// Ordering used by comparison predicates; values of different kinds
    /// (other than int/float) are incomparable.
    pub fn compare(&self, other: &Value) -> Option<std::cmp::Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
            (Value::Int(a), Value::Float(b)) => (*a as f64).partial_cmp(b),
            (Value::Float(a), Value::Int(b)) => a.partial_cmp(&(*b as f64)),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            (Value::Date(a), Value::Date(b)) => Some(a.cmp(b)),
            (Value::Blob(a), Value::Blob(b)) => Some(a.cmp(b)),
            (Value::List(a), Value::List(b)) if a == b => Some(std::cmp::Ordering::Equal),
            (Value::Map(a), Value::Map(b)) if a == b => Some(std::cmp::Ordering::Equal),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value as J;
        match self {
            Value::Int(i) => J::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f).map(J::Number).unwrap_or(J::Null),
            Value::Str(s) => J::from(s.clone()),
            Value::Bool(b) => J::from(*b),
            Value::Date(d) => J::from(d.format("%Y-%m-%d").to_string()),
            Value::Blob(b) => J::from(base64::engine::general_purpose::STANDARD.encode(b)),
            Value::List(l) => J::Array(l.iter().map(Value::to_json).collect()),
            Value::Map(m) => J::Object(m.iter().map(|(k, v)| (k.clone(), J::from(v.clone()))).collect()),
        }
    }

    /// Converts JSON to a value of the declared type.
    pub fn from_json(ty: &FieldType, j: &serde_json::Value) -> Result<Value> {
        use serde_json::Value as J;
        let bad = || Error::SchemaViolation(format!("expected {ty}, got {j}"));
        Ok(match (ty, j) {
            (FieldType::Int, J::Number(n)) => Value::Int(n.as_i64().ok_or_else(bad)?),
            (FieldType::Float, J::Number(n)) => Value::Float(n.as_f64().ok_or_else(bad)?),
            (FieldType::Str, J::String(s)) => Value::Str(s.clone()),
            (FieldType::Bool, J::Bool(b)) => Value::Bool(*b),
            (FieldType::Date, J::String(s)) => {
                Value::Date(NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| bad())?)
            }
            (FieldType::Blob, J::String(s)) => Value::Blob(
                base64::engine::general_purpose::STANDARD
                    .decode(s)
                    .map_err(|_| bad())?,
            ),
            (FieldType::List(inner), J::Array(items)) => Value::List(
                items
                    .iter()
                    .map(|i| Value::from_json(inner, i))
                    .collect::<Result<_>>()?,
            ),
            (FieldType::Map, J::Object(o)) => Value::Map(
                o.iter()
                    .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())).ok_or_else(bad))
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(bad()),
        })
    }

    /// Best-effort conversion of a JSON literal without a declared type, as
    /// used for query predicate literals.
    pub fn from_literal(j: &serde_json::Value) -> Option<Value> {
        use serde_json::Value as J;
        Some(match j {
            J::Number(n) => match n.as_i64() {
                Some(i) => Value::Int(i),
                None => Value::Float(n.as_f64()?),
            },
            J::String(s) => Value::Str(s.clone()),
            J::Bool(b) => Value::Bool(*b),
            J::Array(items) => Value::List(items.iter().map(Value::from_literal).collect::<Option<_>>()?),
            J::Object(o) => Value::Map(
                o.iter()
                    .map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                    .collect::<Option<_>>()?,
            ),
            J::Null => return None,
        })
    }

    /// Adapts a literal to a field's declared type where unambiguous
    /// (date strings, int literals against float fields).
    pub fn coerce(self, ty: &FieldType) -> Value {
        match (ty, self) {
            (FieldType::Date, Value::Str(s)) => match NaiveDate::parse_from_str(&s, "%Y-%m-%d") {
                Ok(d) => Value::Date(d),
                Err(_) => Value::Str(s),
            },
            (FieldType::Float, Value::Int(i)) => Value::Float(i as f64),
            (FieldType::Blob, Value::Str(s)) => match base64::engine::general_purpose::STANDARD.decode(&s) {
                Ok(b) => Value::Blob(b),
                Err(_) => Value::Str(s),
            },
            (_, v) => v,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Int(i) => {
                out.push(T_INT);
                out.extend_from_slice(&i.to_be_bytes());
            }
            Value::Float(f) => {
                out.push(T_FLOAT);
                out.extend_from_slice(&f.to_bits().to_be_bytes());
            }
            Value::Str(s) => {
                out.push(T_STR);
                put_bytes(out, s.as_bytes());
            }
            Value::Bool(b) => {
                out.push(T_BOOL);
                out.push(*b as u8);
            }
            Value::Date(d) => {
                out.push(T_DATE);
                out.extend_from_slice(&((*d - epoch()).num_days() as i32).to_be_bytes());
            }
            Value::Blob(b) => {
                out.push(T_BLOB);
                put_bytes(out, b);
            }
            Value::List(items) => {
                out.push(T_LIST);
                out.extend_from_slice(&(items.len() as u32).to_be_bytes());
                for i in items {
                    i.encode_into(out);
                }
            }
            Value::Map(m) => {
                out.push(T_MAP);
                out.extend_from_slice(&(m.len() as u32).to_be_bytes());
                for (k, v) in m {
                    put_bytes(out, k.as_bytes());
                    put_bytes(out, v.as_bytes());
                }
            }
        }
    }

    fn decode_from(r: &mut Cursor<'_>) -> Result<Value> {
        Ok(match r.u8()? {
            T_INT => Value::Int(i64::from_be_bytes(r.array()?)),
            T_FLOAT => Value::Float(f64::from_bits(u64::from_be_bytes(r.array()?))),
            T_STR => Value::Str(r.string()?),
            T_BOOL => Value::Bool(r.u8()? != 0),
            T_DATE => {
                let days = i32::from_be_bytes(r.array()?);
                Value::Date(
                    epoch()
                        .checked_add_signed(chrono::Duration::days(days as i64))
                        .ok_or_else(|| corrupt("date out of range"))?,
                )
            }
            T_BLOB => Value::Blob(r.bytes()?.to_vec()),
            T_LIST => {
                let n = u32::from_be_bytes(r.array()?) as usize;
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    items.push(Value::decode_from(r)?);
                }
                Value::List(items)
            }
            T_MAP => {
                let n = u32::from_be_bytes(r.array()?) as usize;
                let mut m = BTreeMap::new();
                for _ in 0..n {
                    let k = r.string()?;
                    let v = r.string()?;
                    m.insert(k, v);
                }
                Value::Map(m)
            }
            t => return Err(corrupt(format!("unknown value tag {t}"))),
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("truncated record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = u32::from_be_bytes(self.array()?) as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("record string not utf-8"))
    }
}

/// Field values keyed by field id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Record(pub BTreeMap<u32, Value>);

impl Record {
    pub fn get(&self, field: u32) -> Option<&Value> {
        self.0.get(&field)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        out.extend_from_slice(&(self.0.len() as u16).to_be_bytes());
        for (id, v) in &self.0 {
            out.extend_from_slice(&id.to_be_bytes());
            v.encode_into(&mut out);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Record> {
        let mut r = Cursor { buf, pos: 0 };
        let n = u16::from_be_bytes(r.array()?) as usize;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let id = u32::from_be_bytes(r.array()?);
            m.insert(id, Value::decode_from(&mut r)?);
        }
        Ok(Record(m))
    }

    /// Builds a record from a JSON object, ignoring keys that start with `_`.
    pub fn from_json(schema: &Schema, obj: &serde_json::Map<String, serde_json::Value>) -> Result<Record> {
        let mut m = BTreeMap::new();
        for (k, v) in obj {
            if k.starts_with('_') || v.is_null() {
                continue;
            }
            let f = schema
                .field(k)
                .ok_or_else(|| Error::SchemaViolation(format!("{} has no field {k:?}", schema.type_name)))?;
            m.insert(f.id, Value::from_json(&f.ty, v)?);
        }
        Ok(Record(m))
    }

    pub fn to_json(&self, schema: &Schema) -> serde_json::Map<String, serde_json::Value> {
        self.0
            .iter()
            .filter_map(|(id, v)| schema.field_by_id(*id).map(|f| (f.name.clone(), v.to_json())))
            .collect()
    }
}
