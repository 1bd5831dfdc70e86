//! A1QL parsing.
//!
//! Every level of the JSON document is one traversal step:
//!
//! ```text
//! { "id": "steven.spielberg",
//!   "_out_edge": { "_type": "film.director",
//!     "_vertex": { "_out_edge": { "_type": "film.actor",
//!       "_vertex": { "_select": ["*"] }}}}}
//! ```
//!
//! Plain keys are predicates: `"path": literal` for equality or
//! `"path": {"_op": "<", "_value": literal}`. Paths may index maps and
//! lists: `str_str_map[character]`, `name[0]`. `"id"` always means the
//! vertex's primary key.

use serde_json::{Map, Value as J};

use crate::error::{Error, Result};
use crate::graph::{Direction, Value};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Op {
    fn parse(s: &str) -> Option<Op> {
        Some(match s {
            "=" | "==" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" | "≤" => Op::Le,
            ">" => Op::Gt,
            ">=" | "≥" => Op::Ge,
            _ => return None,
        })
    }

    pub fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            Op::Eq => ord == Equal,
            Op::Ne => ord != Equal,
            Op::Lt => ord == Less,
            Op::Le => ord != Greater,
            Op::Gt => ord == Greater,
            Op::Ge => ord != Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Access {
    Key(String),
    Index(usize),
}

/// `field`, `field[key]` or `field[3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttrPath {
    pub field: String,
    pub access: Option<Access>,
}

impl AttrPath {
    pub fn parse(s: &str) -> Option<AttrPath> {
        match s.find('[') {
            None => (!s.is_empty()).then(|| AttrPath {
                field: s.to_string(),
                access: None,
            }),
            Some(i) => {
                let inner = s[i + 1..].strip_suffix(']')?;
                if i == 0 || inner.is_empty() || inner.contains('[') {
                    return None;
                }
                let access = match inner.parse::<usize>() {
                    Ok(n) => Access::Index(n),
                    Err(_) => Access::Key(inner.to_string()),
                };
                Some(AttrPath {
                    field: s[..i].to_string(),
                    access: Some(access),
                })
            }
        }
    }

    pub fn display(&self) -> String {
        match &self.access {
            None => self.field.clone(),
            Some(Access::Key(k)) => format!("{}[{k}]", self.field),
            Some(Access::Index(i)) => format!("{}[{i}]", self.field),
        }
    }

    /// Applies the access to a field value.
    pub fn extract<'a>(&self, v: &'a Value) -> Option<std::borrow::Cow<'a, Value>> {
        use std::borrow::Cow;
        match (&self.access, v) {
            (None, v) => Some(Cow::Borrowed(v)),
            (Some(Access::Index(i)), Value::List(items)) => items.get(*i).map(Cow::Borrowed),
            (Some(Access::Key(k)), Value::Map(m)) => m.get(k).map(|s| Cow::Owned(Value::Str(s.clone()))),
            (Some(Access::Index(i)), Value::Map(m)) => {
                m.get(&i.to_string()).map(|s| Cow::Owned(Value::Str(s.clone())))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predicate {
    pub path: AttrPath,
    pub op: Op,
    pub value: Value,
    /// True for `"id"`: compares the primary key whatever its field name.
    pub is_pk: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Select {
    Star,
    Count,
    Fields(Vec<AttrPath>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeStep {
    pub dir: Direction,
    pub edge_type: String,
    pub preds: Vec<Predicate>,
    pub vertex: Box<VertexStep>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct VertexStep {
    pub type_name: Option<String>,
    pub preds: Vec<Predicate>,
    pub edge: Option<EdgeStep>,
    pub matches: Vec<EdgeStep>,
    /// Evaluation order of `matches`, from `"_hints": {"match_order": [...]}`.
    pub match_order: Option<Vec<usize>>,
    pub select: Option<Select>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub root: VertexStep,
}

impl Query {
    /// Steps along the traversal path, root first.
    pub fn path(&self) -> Vec<&VertexStep> {
        let mut out = vec![&self.root];
        let mut cur = &self.root;
        while let Some(e) = &cur.edge {
            cur = &e.vertex;
            out.push(cur);
        }
        out
    }

    pub fn edges(&self) -> Vec<&EdgeStep> {
        self.path().iter().filter_map(|s| s.edge.as_ref()).collect()
    }

    pub fn leaf(&self) -> &VertexStep {
        self.path().last().copied().expect("path is never empty")
    }

    pub fn select(&self) -> Select {
        self.leaf().select.clone().unwrap_or(Select::Star)
    }
}

fn perr(pos: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        pos: pos.to_string(),
        msg: msg.into(),
    }
}

/// Parses query text; syntax errors carry their line and column.
pub fn parse(text: &str) -> Result<Query> {
    let doc: J = serde_json::from_str(text).map_err(|e| perr(&format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    parse_value(&doc)
}

pub fn parse_value(doc: &J) -> Result<Query> {
    let obj = doc.as_object().ok_or_else(|| perr("$", "query must be an object"))?;
    let root = parse_vertex(obj, "$")?;
    let has_anchor = root.preds.iter().any(|p| p.is_pk && p.op == Op::Eq)
        || (root.type_name.is_some() && root.preds.iter().any(|p| p.op == Op::Eq && p.path.access.is_none()));
    if !has_anchor {
        return Err(perr("$", "root step needs an \"id\" or a _type with an equality predicate"));
    }
    Ok(Query { root })
}

fn literal(v: &J, pos: &str) -> Result<Value> {
    Value::from_literal(v).ok_or_else(|| perr(pos, "null is not a valid literal"))
}

fn parse_pred(key: &str, v: &J, pos: &str) -> Result<Predicate> {
    let path = AttrPath::parse(key).ok_or_else(|| perr(pos, format!("bad attribute path {key:?}")))?;
    let (op, value) = match v {
        J::Object(o) if o.contains_key("_op") => {
            for k in o.keys() {
                if k != "_op" && k != "_value" {
                    return Err(Error::UnknownKey(k.clone()));
                }
            }
            let op_s = o["_op"].as_str().ok_or_else(|| perr(pos, "_op must be a string"))?;
            let op = Op::parse(op_s).ok_or_else(|| perr(pos, format!("unknown operator {op_s:?}")))?;
            let lit = o.get("_value").ok_or_else(|| perr(pos, "_op without _value"))?;
            (op, literal(lit, pos)?)
        }
        v => (Op::Eq, literal(v, pos)?),
    };
    Ok(Predicate {
        is_pk: key == "id",
        path,
        op,
        value,
    })
}

fn parse_edge(obj: &Map<String, J>, dir: Direction, pos: &str) -> Result<EdgeStep> {
    let mut edge_type = None;
    let mut vertex = None;
    let mut preds = Vec::new();
    for (k, v) in obj {
        let here = format!("{pos}.{k}");
        match k.as_str() {
            "_type" => edge_type = Some(v.as_str().ok_or_else(|| perr(&here, "_type must be a string"))?.to_string()),
            "_vertex" => {
                let o = v.as_object().ok_or_else(|| perr(&here, "_vertex must be an object"))?;
                vertex = Some(parse_vertex(o, &here)?);
            }
            k if k.starts_with('_') => return Err(Error::UnknownKey(k.to_string())),
            _ => preds.push(parse_pred(k, v, &here)?),
        }
    }
    Ok(EdgeStep {
        dir,
        edge_type: edge_type.ok_or_else(|| perr(pos, "edge step needs _type"))?,
        preds,
        vertex: Box::new(vertex.unwrap_or_default()),
    })
}

fn parse_vertex(obj: &Map<String, J>, pos: &str) -> Result<VertexStep> {
    let mut s = VertexStep::default();
    for (k, v) in obj {
        let here = format!("{pos}.{k}");
        match k.as_str() {
            "_type" => s.type_name = Some(v.as_str().ok_or_else(|| perr(&here, "_type must be a string"))?.to_string()),
            "_out_edge" | "_in_edge" => {
                if s.edge.is_some() {
                    return Err(perr(&here, "only one traversal edge per step; use _match for more"));
                }
                let dir = if k == "_out_edge" { Direction::Out } else { Direction::In };
                let o = v.as_object().ok_or_else(|| perr(&here, "edge step must be an object"))?;
                s.edge = Some(parse_edge(o, dir, &here)?);
            }
            "_match" => {
                let items = v.as_array().ok_or_else(|| perr(&here, "_match must be an array"))?;
                for (i, item) in items.iter().enumerate() {
                    let at = format!("{here}[{i}]");
                    let o = item.as_object().ok_or_else(|| perr(&at, "match branch must be an object"))?;
                    if o.len() != 1 {
                        return Err(perr(&at, "match branch needs exactly one _out_edge or _in_edge"));
                    }
                    let (ek, ev) = o.iter().next().expect("one entry");
                    let dir = match ek.as_str() {
                        "_out_edge" => Direction::Out,
                        "_in_edge" => Direction::In,
                        other => return Err(Error::UnknownKey(other.to_string())),
                    };
                    let eo = ev.as_object().ok_or_else(|| perr(&at, "edge step must be an object"))?;
                    let branch = parse_edge(eo, dir, &format!("{at}.{ek}"))?;
                    if has_select(&branch.vertex) {
                        return Err(perr(&at, "_select is not allowed inside _match"));
                    }
                    s.matches.push(branch);
                }
            }
            "_select" => {
                let items = v.as_array().ok_or_else(|| perr(&here, "_select must be an array"))?;
                let names: Vec<&str> = items
                    .iter()
                    .map(|i| i.as_str().ok_or_else(|| perr(&here, "_select items must be strings")))
                    .collect::<Result<_>>()?;
                s.select = Some(match names.as_slice() {
                    ["*"] => Select::Star,
                    ["_count(*)"] => Select::Count,
                    [] => return Err(perr(&here, "empty _select")),
                    fields => Select::Fields(
                        fields
                            .iter()
                            .map(|f| {
                                if f.starts_with('_') || *f == "*" {
                                    return Err(perr(&here, format!("{f:?} cannot be mixed with other selections")));
                                }
                                AttrPath::parse(f).ok_or_else(|| perr(&here, format!("bad attribute path {f:?}")))
                            })
                            .collect::<Result<_>>()?,
                    ),
                });
            }
            "_hints" => {
                let order = v
                    .get("match_order")
                    .and_then(J::as_array)
                    .ok_or_else(|| perr(&here, "_hints supports only match_order"))?;
                let order: Vec<usize> = order
                    .iter()
                    .map(|i| i.as_u64().map(|n| n as usize).ok_or_else(|| perr(&here, "match_order holds indexes")))
                    .collect::<Result<_>>()?;
                s.match_order = Some(order);
            }
            k if k.starts_with('_') => return Err(Error::UnknownKey(k.to_string())),
            _ => s.preds.push(parse_pred(k, v, &here)?),
        }
    }
    if s.select.is_some() && s.edge.is_some() {
        return Err(perr(pos, "_select is only allowed at the last step"));
    }
    if let Some(order) = &s.match_order {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..s.matches.len()).collect::<Vec<_>>() {
            return Err(perr(pos, "match_order must permute the _match branches"));
        }
    }
    Ok(s)
}

fn has_select(s: &VertexStep) -> bool {
    s.select.is_some()
        || s.edge.as_ref().is_some_and(|e| has_select(&e.vertex))
        || s.matches.iter().any(|m| has_select(&m.vertex))
}
