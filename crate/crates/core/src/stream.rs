//! Detector time-tag streams and their text representation.
//!
//! A stream file is plain text. Header lines start with `#`; `key=value`
//! header lines carry metadata, at minimum `config_digest` and `seed`.
//! Every other non-empty line is one record `channel,timestamp_ps`:
//!
//! ```text
//! # xxcascade time-tag stream v1
//! # config_digest=6f1c...
//! # seed=42
//! # mode=hbt
//! # pulse_period_ps=13100
//! # channel,timestamp_ps
//! 0,13117
//! 1,13145
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const STREAM_MAGIC: &str = "xxcascade time-tag stream v1";

/// One detector click. Ordering is by timestamp, then channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub timestamp: i64,
    pub channel: u8,
}

impl TimeTag {
    pub fn new(channel: u8, timestamp: i64) -> Self {
        TimeTag { timestamp, channel }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StreamHeader {
    pub config_digest: String,
    pub seed: u64,
    /// Additional metadata in file order, e.g. `mode`, `pulse_period_ps`.
    pub fields: Vec<(String, String)>,
}

impl StreamHeader {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key, value)),
        }
    }

    pub fn pulse_period(&self) -> Option<f64> {
        self.get("pulse_period_ps").and_then(|v| v.parse().ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TimeTagStream {
    pub header: StreamHeader,
    pub records: Vec<TimeTag>,
}

impl TimeTagStream {
    pub fn is_sorted(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp)
    }

    /// Timestamps of one channel, in stream order.
    pub fn channel(&self, channel: u8) -> Vec<i64> {
        self.records
            .iter()
            .filter(|r| r.channel == channel)
            .map(|r| r.timestamp)
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {STREAM_MAGIC}")?;
        writeln!(out, "# config_digest={}", self.header.config_digest)?;
        writeln!(out, "# seed={}", self.header.seed)?;
        for (k, v) in &self.header.fields {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "# channel,timestamp_ps")?;
        for r in &self.records {
            writeln!(out, "{},{}", r.channel, r.timestamp)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut header = StreamHeader::default();
        let mut digest = None;
        let mut seed = None;
        let mut records = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    let (k, v) = (k.trim(), v.trim());
                    match k {
                        "config_digest" => digest = Some(v.to_string()),
                        "seed" => {
                            seed = Some(v.parse().map_err(|_| {
                                Error::Format(format!("line {}: bad seed `{v}`", lineno + 1))
                            })?)
                        }
                        _ => header.fields.push((k.to_string(), v.to_string())),
                    }
                }
                continue;
            }
            let bad = || Error::Format(format!("line {}: expected `channel,timestamp_ps`, got `{line}`", lineno + 1));
            let (ch, ts) = line.split_once(',').ok_or_else(bad)?;
            let channel: u8 = ch.trim().parse().map_err(|_| bad())?;
            if channel > 1 {
                return Err(Error::Format(format!(
                    "line {}: channel {channel} outside {{0, 1}}",
                    lineno + 1
                )));
            }
            let timestamp: i64 = ts.trim().parse().map_err(|_| bad())?;
            records.push(TimeTag { timestamp, channel });
        }
        header.config_digest =
            digest.ok_or_else(|| Error::Format("missing `config_digest` header".into()))?;
        header.seed = seed.ok_or_else(|| Error::Format("missing `seed` header".into()))?;
        Ok(TimeTagStream { header, records })
    }
}
