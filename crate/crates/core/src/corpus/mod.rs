//! Vulnerable/fixed code-pair datasets: loading, validation, splitting and
//! a synthetic bug-injection generator.

mod synthetic;

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub use synthetic::{gen_synthetic, BugClass};

/// One vulnerable/fixed pair. Offsets are character (not byte) positions
/// into `vulnerable_code`; `vuln_end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub vulnerable_code: String,
    pub fixed_code: String,
    pub cwe_id: String,
    pub vuln_start: usize,
    pub vuln_end: usize,
}

impl SampleRecord {
    /// Checks the record invariants, naming the offending field.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.vulnerable_code.is_empty() {
            return Err(("vulnerable_code", "must be non-empty".into()));
        }
        if self.fixed_code.is_empty() {
            return Err(("fixed_code", "must be non-empty".into()));
        }
        if !is_cwe_id(&self.cwe_id) {
            return Err(("cwe_id", format!("malformed CWE id {:?}", self.cwe_id)));
        }
        let len = self.vulnerable_code.chars().count();
        if self.vuln_start > self.vuln_end {
            return Err(("vuln_start", format!("start {} after end {}", self.vuln_start, self.vuln_end)));
        }
        if self.vuln_end > len {
            return Err(("vuln_end", format!("span out of bounds ({} > {len})", self.vuln_end)));
        }
        Ok(())
    }
}

/// `CWE-` followed by one to four ASCII digits.
pub fn is_cwe_id(s: &str) -> bool {
    s.strip_prefix("CWE-")
        .is_some_and(|d| (1..=4).contains(&d.len()) && d.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::invalid(format!("split tag must be train or test, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub valid: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

/// Parses one JSON object per line. Blank lines are skipped; any invalid
/// record aborts the load with its 1-based line number.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, line_no)?);
    }
    Ok(records)
}

fn parse_line(line: &str, line_no: usize) -> Result<SampleRecord> {
    let err = |field: &'static str, message: String| Error::Record {
        line: line_no,
        field,
        message,
    };
    let value: Value =
        serde_json::from_str(line).map_err(|e| err("record", format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record", "expected a JSON object".into()))?;
    let text = |field: &'static str| -> Result<String> {
        match obj.get(field) {
            None => Err(err(field, "missing field".into())),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(err(field, "expected a string".into())),
        }
    };
    let offset = |field: &'static str| -> Result<usize> {
        match obj.get(field) {
            None => Err(err(field, "missing field".into())),
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| err(field, "expected a non-negative integer".into())),
        }
    };
    let record = SampleRecord {
        id: text("id")?,
        vulnerable_code: text("vulnerable_code")?,
        fixed_code: text("fixed_code")?,
        cwe_id: text("cwe_id")?,
        vuln_start: offset("vuln_start")?,
        vuln_end: offset("vuln_end")?,
    };
    record.validate().map_err(|(field, message)| err(field, message))?;
    Ok(record)
}

pub fn load_dataset(path: &Path, split_tag: SplitTag) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(BufReader::new(file))?;
    log::info!("loaded {} {split_tag} records from {}", records.len(), path.display());
    Ok(records)
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Seeded shuffle, then the first `floor(valid_fraction * n)` records become validation.
pub fn split_train_valid(records: &[SampleRecord], valid_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(Error::invalid(format!("valid_fraction must be in [0, 1), got {valid_fraction}")));
    }
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty record list"));
    }
    let n_valid = valid_count(records.len(), valid_fraction);
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::new(seed).fork(0x5917).shuffle(&mut order);
    let valid = order[..n_valid].iter().map(|&i| records[i].clone()).collect();
    let train = order[n_valid..].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit {
        train,
        valid,
        test: Vec::new(),
    })
}

pub fn valid_count(total: usize, valid_fraction: f64) -> usize {
    (valid_fraction * total as f64).floor() as usize
}

/// Length summary for the `stats` report.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub records: usize,
    pub per_cwe: Vec<(String, usize)>,
    /// `(percentile, length)` pairs.
    pub percentiles: Vec<(u32, usize)>,
    pub max_len: usize,
    pub over_max_fraction: f64,
    pub unit: &'static str,
}

impl CorpusStats {
    /// `lengths[i]` is the model-input length of `records[i]` in `unit`s.
    pub fn compute(records: &[SampleRecord], lengths: &[usize], max_len: usize, unit: &'static str) -> Self {
        let mut per_cwe = std::collections::BTreeMap::new();
        for r in records {
            *per_cwe.entry(r.cwe_id.clone()).or_insert(0) += 1;
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let percentiles = [50, 90, 99, 100]
            .into_iter()
            .map(|p| {
                let len = if sorted.is_empty() {
                    0
                } else {
                    let rank = ((p as f64 / 100.0) * sorted.len() as f64).ceil() as usize;
                    sorted[rank.clamp(1, sorted.len()) - 1]
                };
                (p, len)
            })
            .collect();
        let over = lengths.iter().filter(|&&l| l > max_len).count();
        CorpusStats {
            records: records.len(),
            per_cwe: per_cwe.into_iter().collect(),
            percentiles,
            max_len,
            over_max_fraction: if lengths.is_empty() { 0.0 } else { over as f64 / lengths.len() as f64 },
            unit,
        }
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>10}", "records", self.records)?;
        for (cwe, n) in &self.per_cwe {
            writeln!(f, "{:<24}{:>10}", format!("  {cwe}"), n)?;
        }
        for (p, len) in &self.percentiles {
            writeln!(f, "{:<24}{:>10}", format!("p{p} length ({})", self.unit), len)?;
        }
        writeln!(
            f,
            "{:<24}{:>10.4}",
            format!("fraction > {}", self.max_len),
            self.over_max_fraction
        )
    }
}
