//! Comma-separated tables with `#` metadata, and flat key-value records.
//!
//! ```text
//! # xxcascade coincidence histogram v1
//! # bin_width_ps=10
//! # delay_ps,counts
//! -149995,0
//! ```
//!
//! The last `#` line without `=` names the columns. Numbers are written with
//! Rust's locale-independent formatting.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub title: String,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            title: title.into(),
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parsed metadata value; a missing or malformed key is a format error.
    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let v = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("missing `{key}` header")))?;
        v.parse()
            .map_err(|_| Error::Format(format!("header `{key}`: not a number: `{v}`")))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if !self.title.is_empty() {
            writeln!(out, "# {}", self.title)?;
        }
        for (k, v) in &self.meta {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "# {}", self.columns.join(","))?;
        let mut line = String::new();
        for row in &self.rows {
            line.clear();
            for (i, x) in row.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&x.to_string());
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut table = Table::default();
        let mut first_comment = true;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                let c = c.trim();
                if let Some((k, v)) = c.split_once('=') {
                    table.meta.push((k.trim().to_string(), v.trim().to_string()));
                } else if c.contains(',') {
                    table.columns = c.split(',').map(|s| s.trim().to_string()).collect();
                } else if first_comment {
                    table.title = c.to_string();
                }
                first_comment = false;
                continue;
            }
            if table.columns.is_empty() {
                return Err(Error::Format(format!("line {}: data before column header", lineno + 1)));
            }
            let row = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("line {}: non-numeric field in `{line}`", lineno + 1)))?;
            if row.len() != table.columns.len() {
                return Err(Error::Format(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    table.columns.len(),
                    row.len()
                )));
            }
            table.rows.push(row);
        }
        if table.columns.is_empty() {
            return Err(Error::Format("missing column header".into()));
        }
        Ok(table)
    }
}

/// Ordered `key=value` lines, used for result records and manifests.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    pub entries: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, v) in &self.entries {
            writeln!(out, "{k}={v}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut rec = Record::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected key=value, got `{line}`")))?;
            rec.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(rec)
    }
}

impl std::fmt::Display for Record {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
