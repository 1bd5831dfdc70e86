//! Report rendering for `--out json|table`.

use clap::ValueEnum;
use serde_json::Value as J;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    #[default]
    Json,
    Table,
}

pub fn render(v: &J, fmt: OutFormat) -> String {
    match fmt {
        OutFormat::Json => serde_json::to_string_pretty(v).unwrap(),
        OutFormat::Table => {
            let mut rows = Vec::new();
            flatten("", v, &mut rows);
            let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
        }
    }
}

fn flatten(prefix: &str, v: &J, rows: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        J::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                flatten(&key(k), v, rows);
            }
        }
        // rows of results stay one line each
        J::Array(a) if !a.is_empty() && a.iter().any(|x| x.is_object() || x.is_array()) => {
            for (i, v) in a.iter().enumerate() {
                match v {
                    J::Object(_) | J::Array(_) => rows.push((key(&i.to_string()), v.to_string())),
                    _ => flatten(&key(&i.to_string()), v, rows),
                }
            }
        }
        J::String(s) => rows.push((prefix.to_string(), s.clone())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}
