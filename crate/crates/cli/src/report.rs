//! Command reports and their three renderings.
//!
//! Every report splits into `golden` fields, which are deterministic given
//! the seed and may be asserted, and `informational` fields such as wall
//! clock timings, which may not.

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Format;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_pretty(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.header);
        out += &line(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
        for r in &self.rows {
            out += &line(r);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: &'static str,
    pub passed: bool,
    pub golden: Value,
    pub informational: Value,
    /// Tables in display order. CSV output is the first table only.
    pub tables: Vec<(String, Table)>,
    /// Human-readable lines appended to pretty output.
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(command: &'static str, golden: impl Serialize) -> Self {
        Report {
            command,
            passed: true,
            golden: serde_json::to_value(golden).expect("report fields serialize"),
            informational: json!({}),
            tables: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json_value(&self) -> Value {
        json!({
            "command": self.command,
            "passed": self.passed,
            "golden": self.golden,
            "informational": self.informational,
        })
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(&self.to_json_value()).expect("values serialize") + "\n",
            Format::Csv => self.tables.first().map(|(_, t)| t.to_csv()).unwrap_or_default(),
            Format::Pretty => {
                let mut out = String::new();
                for (title, t) in &self.tables {
                    out += &format!("{title}\n{}\n", t.to_pretty());
                }
                for n in &self.notes {
                    out += n;
                    out.push('\n');
                }
                out += &format!("{}: {}\n", self.command, if self.passed { "PASS" } else { "FAIL" });
                out
            }
        }
    }
}

/// Fixed-width scientific notation, stable across platforms.
pub fn sci(x: f64) -> String {
    format!("{x:.3e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_tables() {
        let mut t = Table::new(&["a", "long_name"]);
        t.push(vec!["1".into(), "x".into()]);
        assert_eq!(t.to_csv(), "a,long_name\n1,x\n");
        assert_eq!(t.to_pretty(), "a  long_name\n-  ---------\n1  x\n");
        let mut r = Report::new("demo", json!({"k": 1}));
        r.tables.push(("T".into(), t));
        assert_eq!(r.render(Format::Csv), "a,long_name\n1,x\n");
        assert!(r.render(Format::Pretty).ends_with("demo: PASS\n"));
        let v: Value = serde_json::from_str(&r.render(Format::Json)).unwrap();
        assert_eq!(v["golden"]["k"], 1);
    }
}
