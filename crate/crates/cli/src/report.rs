//! Records go to stdout either as an aligned table or as one JSON object
//! per line.

use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Jsonl,
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => u.to_string(),
            (_, Some(i), _) => i.to_string(),
            (_, _, Some(f)) => format!("{f:.4}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

/// Renders `rows` (JSON objects). Table columns are the union of keys in
/// first-seen order.
pub fn render(format: Format, rows: &[Map<String, Value>]) -> String {
    match format {
        Format::Jsonl => rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("json values serialize") + "\n")
            .collect(),
        Format::Table => {
            let mut columns: Vec<&str> = Vec::new();
            for r in rows {
                for k in r.keys() {
                    if !columns.contains(&k.as_str()) {
                        columns.push(k);
                    }
                }
            }
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| columns.iter().map(|c| r.get(*c).map_or("-".into(), cell)).collect())
                .collect();
            let widths: Vec<usize> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
                .collect();
            let line = |vals: Vec<&str>| -> String {
                let padded: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
                padded.join("  ").trim_end().to_string() + "\n"
            };
            let mut out = line(columns.clone());
            for r in &cells {
                out += &line(r.iter().map(String::as_str).collect());
            }
            out
        }
    }
}

pub fn print(format: Format, rows: &[Map<String, Value>]) {
    print!("{}", render(format, rows));
}

/// Converts a serializable struct into a row.
pub fn row(v: impl serde::Serialize) -> Map<String, Value> {
    match serde_json::to_value(v).expect("record serializes") {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    }
}
