//! Type schemas and their JSON definition format:
//! `{"type": ..., "kind": "vertex"|"edge", "fields": [{"id":0,"name":...,"type":...}], "primary_key": ...}`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldType {
    Int,
    Float,
    Str,
    Bool,
    Date,
    Blob,
    List(Box<FieldType>),
    Map,
}

impl FieldType {
    pub fn parse(s: &str) -> Result<FieldType> {
        let up = s.trim().to_ascii_uppercase();
        let scalar = |t: &str| -> Option<FieldType> {
            Some(match t {
                "INT" => FieldType::Int,
                "FLOAT" => FieldType::Float,
                "STRING" => FieldType::Str,
                "BOOL" => FieldType::Bool,
                "DATE" => FieldType::Date,
                "BLOB" => FieldType::Blob,
                _ => return None,
            })
        };
        if let Some(t) = scalar(&up) {
            return Ok(t);
        }
        if let Some(inner) = up.strip_prefix("LIST<").and_then(|r| r.strip_suffix('>')) {
            if let Some(t) = scalar(inner.trim()) {
                return Ok(FieldType::List(Box::new(t)));
            }
        }
        if up.replace(' ', "") == "MAP<STRING,STRING>" {
            return Ok(FieldType::Map);
        }
        Err(Error::SchemaViolation(format!("unknown field type {s:?}")))
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, FieldType::List(_) | FieldType::Map)
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::Int => write!(f, "INT"),
            FieldType::Float => write!(f, "FLOAT"),
            FieldType::Str => write!(f, "STRING"),
            FieldType::Bool => write!(f, "BOOL"),
            FieldType::Date => write!(f, "DATE"),
            FieldType::Blob => write!(f, "BLOB"),
            FieldType::List(t) => write!(f, "LIST<{t}>"),
            FieldType::Map => write!(f, "MAP<STRING,STRING>"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TypeKind {
    Vertex,
    Edge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub id: u32,
    pub name: String,
    pub ty: FieldType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub type_name: String,
    pub kind: TypeKind,
    pub fields: Vec<Field>,
    pub primary_key: Option<String>,
}

#[derive(Deserialize)]
struct JsonField {
    id: u32,
    name: String,
    #[serde(rename = "type")]
    ty: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSchema {
    #[serde(rename = "type")]
    type_name: String,
    kind: String,
    #[serde(default)]
    fields: Vec<JsonField>,
    #[serde(default)]
    primary_key: Option<String>,
}

impl Schema {
    pub fn vertex(type_name: &str, fields: &[(&str, FieldType)], primary_key: &str) -> Result<Schema> {
        Schema {
            type_name: type_name.into(),
            kind: TypeKind::Vertex,
            fields: fields
                .iter()
                .enumerate()
                .map(|(i, (n, t))| Field {
                    id: i as u32,
                    name: n.to_string(),
                    ty: t.clone(),
                })
                .collect(),
            primary_key: Some(primary_key.into()),
        }
        .validated()
    }

    pub fn edge(type_name: &str, fields: &[(&str, FieldType)]) -> Result<Schema> {
        Schema {
            type_name: type_name.into(),
            kind: TypeKind::Edge,
            fields: fields
                .iter()
                .enumerate()
                .map(|(i, (n, t))| Field {
                    id: i as u32,
                    name: n.to_string(),
                    ty: t.clone(),
                })
                .collect(),
            primary_key: None,
        }
        .validated()
    }

    pub fn from_json(text: &str) -> Result<Schema> {
        let j: JsonSchema =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(format!("schema json: {e}")))?;
        Self::from_parsed(j)
    }

    /// Parses either one schema object or an array of them.
    pub fn many_from_json(text: &str) -> Result<Vec<Schema>> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(format!("schema json: {e}")))?;
        let items = match v {
            serde_json::Value::Array(a) => a,
            other => vec![other],
        };
        items
            .into_iter()
            .map(|i| {
                let j: JsonSchema = serde_json::from_value(i)
                    .map_err(|e| Error::SchemaViolation(format!("schema json: {e}")))?;
                Self::from_parsed(j)
            })
            .collect()
    }

    fn from_parsed(j: JsonSchema) -> Result<Schema> {
        let kind = match j.kind.as_str() {
            "vertex" => TypeKind::Vertex,
            "edge" => TypeKind::Edge,
            k => return Err(Error::SchemaViolation(format!("unknown kind {k:?}"))),
        };
        let fields = j
            .fields
            .into_iter()
            .map(|f| {
                Ok(Field {
                    id: f.id,
                    name: f.name,
                    ty: FieldType::parse(&f.ty)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Schema {
            type_name: j.type_name,
            kind,
            fields,
            primary_key: j.primary_key,
        }
        .validated()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "type": self.type_name,
            "kind": match self.kind { TypeKind::Vertex => "vertex", TypeKind::Edge => "edge" },
            "fields": self.fields.iter().map(|f| serde_json::json!({
                "id": f.id, "name": f.name, "type": f.ty.to_string()
            })).collect::<Vec<_>>(),
        });
        if let Some(pk) = &self.primary_key {
            v["primary_key"] = pk.clone().into();
        }
        v
    }

    fn validated(self) -> Result<Schema> {
        if self.type_name.is_empty() || self.type_name.contains('/') {
            return Err(Error::SchemaViolation(format!("bad type name {:?}", self.type_name)));
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for f in &self.fields {
            if !ids.insert(f.id) || !names.insert(f.name.as_str()) {
                return Err(Error::SchemaViolation(format!("duplicate field {}", f.name)));
            }
            if f.name.starts_with('_') || f.name.contains('[') {
                return Err(Error::SchemaViolation(format!("bad field name {:?}", f.name)));
            }
        }
        match (self.kind, &self.primary_key) {
            (TypeKind::Vertex, Some(pk)) => {
                let f = self
                    .field(pk)
                    .ok_or_else(|| Error::SchemaViolation(format!("primary key {pk:?} is not a field")))?;
                if !matches!(f.ty, FieldType::Str | FieldType::Int) {
                    return Err(Error::SchemaViolation("primary key must be STRING or INT".into()));
                }
            }
            (TypeKind::Vertex, None) => {
                return Err(Error::SchemaViolation("vertex types need a primary key".into()))
            }
            (TypeKind::Edge, Some(_)) => {
                return Err(Error::SchemaViolation("edge types have no primary key".into()))
            }
            (TypeKind::Edge, None) => {}
        }
        Ok(self)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_by_id(&self, id: u32) -> Option<&Field> {
        self.fields.iter().find(|f| f.id == id)
    }

    pub fn pk_field(&self) -> Option<&Field> {
        self.primary_key.as_deref().and_then(|pk| self.field(pk))
    }
}
