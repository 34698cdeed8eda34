//! Per-iteration solver records and their CSV form
//! (`iter,oracle_calls,utility,violation,gap,step_type`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ProblemInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepType {
    Fgm,
    Productive,
    Nonproductive,
}

impl fmt::Display for StepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepType::Fgm => "fgm",
            StepType::Productive => "productive",
            StepType::Nonproductive => "nonproductive",
        })
    }
}

impl FromStr for StepType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgm" => Ok(StepType::Fgm),
            "productive" => Ok(StepType::Productive),
            "nonproductive" => Ok(StepType::Nonproductive),
            other => Err(Error::InvalidInput(format!("unknown step type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub oracle_calls: u64,
    pub utility: f64,
    pub violation: f64,
    /// Duality gap, when the solver evaluated one for this row.
    pub gap: Option<f64>,
    pub step_type: StepType,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub rows: Vec<TraceRow>,
    /// Hash of the serialized instance the trace was produced on.
    pub fingerprint: String,
    pub params: BTreeMap<String, String>,
}

impl SolverTrace {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            rows: Vec::new(),
            fingerprint: fingerprint.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wr.write_record(["iter", "oracle_calls", "utility", "violation", "gap", "step_type"])?;
        for r in &self.rows {
            wr.write_record([
                r.iter.to_string(),
                r.oracle_calls.to_string(),
                fmt_f64(r.utility),
                fmt_f64(r.violation),
                r.gap.map(fmt_f64).unwrap_or_default(),
                r.step_type.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Reads rows back; fingerprint and parameters are not part of the CSV.
    pub fn read_csv<R: Read>(r: R) -> Result<Vec<TraceRow>> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.iter().collect::<Vec<_>>()
            != ["iter", "oracle_calls", "utility", "violation", "gap", "step_type"]
        {
            return Err(Error::InvalidInput(format!("unexpected trace header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let num = |k: usize| -> Result<f64> {
                field(k)
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad number {:?}", field(k))))
            };
            let int = |k: usize| -> Result<u64> {
                field(k)
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad integer {:?}", field(k))))
            };
            rows.push(TraceRow {
                iter: int(0)?,
                oracle_calls: int(1)?,
                utility: num(2)?,
                violation: num(3)?,
                gap: if field(4).is_empty() { None } else { Some(num(4)?) },
                step_type: field(5).parse()?,
            });
        }
        Ok(rows)
    }
}

/// Shortest representation that parses back to the same value.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Hex SHA-256 of the instance's canonical JSON.
pub fn fingerprint(inst: &ProblemInstance) -> String {
    let digest = Sha256::digest(inst.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = SolverTrace::new("abc");
        t.push(TraceRow {
            iter: 1,
            oracle_calls: 10,
            utility: 0.1,
            violation: 0.0,
            gap: None,
            step_type: StepType::Nonproductive,
        });
        t.push(TraceRow {
            iter: 2,
            oracle_calls: 20,
            utility: -1.5e-300,
            violation: 2.0,
            gap: Some(1.0 / 3.0),
            step_type: StepType::Fgm,
        });
        let s = t.to_csv_string();
        assert!(s.starts_with("iter,oracle_calls,utility,violation,gap,step_type\n"));
        assert!(s.contains("1,10,0.1,0.0,,nonproductive\n"));
        assert!(!s.contains('\r'));
        assert_eq!(SolverTrace::read_csv(s.as_bytes()).unwrap(), t.rows);
    }

    #[test]
    fn rejects_wrong_header() {
        assert!(SolverTrace::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
