//! Run reports: deterministic JSON with input provenance, and speedup
//! comparison between two reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exact::{self, Exact};

pub const TOOL: &str = "flexsim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Input file name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: Metadata,
    pub payload: Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Report {
    pub fn new(command: &str, payload: Value) -> Self {
        Report {
            metadata: Metadata {
                tool: TOOL.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: command.into(),
                inputs: BTreeMap::new(),
            },
            payload,
        }
    }

    /// Records the hash of an input file under `name`.
    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let h = sha256_hex(&read(path)?);
        self.metadata.inputs.insert(name.into(), h);
        Ok(())
    }

    /// Pretty JSON with a trailing newline. Object keys are sorted, so equal
    /// reports serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Report> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Every object in the payload carrying an exact latency
    /// (`seconds_exact`), keyed by its JSON path.
    pub fn latencies(&self) -> Result<BTreeMap<String, Exact>> {
        let mut out = BTreeMap::new();
        collect(&self.payload, String::new(), &mut out)?;
        Ok(out)
    }
}

fn collect(v: &Value, path: String, out: &mut BTreeMap<String, Exact>) -> Result<()> {
    match v {
        Value::Object(map) => {
            if let Some(Value::String(s)) = map.get("seconds_exact") {
                let secs = exact::parse(s)
                    .ok_or_else(|| Error::Format(format!("{path}: bad rational {s:?}")))?;
                out.insert(
                    if path.is_empty() {
                        ".".into()
                    } else {
                        path.clone()
                    },
                    secs,
                );
            }
            for (k, child) in map {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                collect(child, p, out)?;
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                collect(child, format!("{path}[{i}]"), out)?;
            }
        }
        _ => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub key: String,
    pub a_seconds: f64,
    pub b_seconds: f64,
    /// `a / b`.
    pub speedup: f64,
    pub speedup_exact: String,
}

/// Speedup `a / b` for every latency present in both reports. Reports that
/// want an end-to-end ratio carry it as their own entry.
pub fn compare(a: &Report, b: &Report) -> Result<Vec<CompareRow>> {
    let la = a.latencies()?;
    let lb = b.latencies()?;
    let shared: Vec<&String> = la.keys().filter(|k| lb.contains_key(*k)).collect();
    if shared.is_empty() {
        return Err(Error::Format(
            "the two reports share no latency entries".into(),
        ));
    }
    let row = |key: String, x: Exact, y: Exact| -> Result<CompareRow> {
        if y == Exact::from_integer(0) {
            return Err(Error::Format(format!("{key}: second latency is zero")));
        }
        let s = x / y;
        Ok(CompareRow {
            key,
            a_seconds: exact::to_f64(&x),
            b_seconds: exact::to_f64(&y),
            speedup: exact::to_f64(&s),
            speedup_exact: exact::render(&s),
        })
    };
    shared
        .into_iter()
        .map(|k| row(k.clone(), la[k], lb[k]))
        .collect()
}

/// Comparison rows as CSV: `key,a_seconds,b_seconds,speedup,speedup_exact`.
pub fn write_compare_csv<W: std::io::Write>(w: W, rows: &[CompareRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Format(e.to_string()))
}
