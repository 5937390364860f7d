//! Length diagnostics and deterministic report files.
//!
//! Lengths are whitespace token counts, a tokenizer-free stand-in that keeps
//! comparisons consistent across corpora.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::CandidateTriplet;
use crate::corpus::PreferenceExample;
use crate::util::token_count;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dataset is empty")]
    Empty,
    #[error("bin edges must be finite and strictly increasing")]
    Bins,
    #[error("field {0:?} is not a scalar")]
    NotScalar(String),
    #[error("malformed report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Anything with a preferred and a dispreferred text.
pub trait ChosenRejected {
    fn chosen_rejected(&self) -> (&str, &str);
}

impl ChosenRejected for PreferenceExample {
    fn chosen_rejected(&self) -> (&str, &str) {
        (&self.chosen, &self.rejected)
    }
}

/// The first response counts as chosen when its label is at least 0.5, so
/// ties count their first (randomly ordered) response.
impl ChosenRejected for CandidateTriplet {
    fn chosen_rejected(&self) -> (&str, &str) {
        if self.label.value() >= 0.5 {
            (&self.response_a, &self.response_b)
        } else {
            (&self.response_b, &self.response_a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    /// Lower bin edges; bin `j` is `[bins[j], bins[j + 1])` and the last bin
    /// is open above. Lengths below `bins[0]` fall in the first bin.
    pub bins: Vec<f64>,
    pub chosen_hist: Vec<usize>,
    pub rejected_hist: Vec<usize>,
    pub mean_chosen: f64,
    pub mean_rejected: f64,
    pub longer_fraction: f64,
    pub shorter_fraction: f64,
    pub equal_fraction: f64,
    pub n: usize,
}

/// Nine edges spanning `[0, p99]` in eight equal steps; the last is the
/// overflow bin.
pub fn default_bins(lengths: &[usize]) -> Vec<f64> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let p99 = if sorted.is_empty() {
        0
    } else {
        let rank = (0.99 * sorted.len() as f64).ceil() as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    };
    let top = (p99 as f64).max(8.0);
    (0..=8).map(|k| top * k as f64 / 8.0).collect()
}

fn bin_of(bins: &[f64], len: f64) -> usize {
    bins.partition_point(|e| *e <= len).saturating_sub(1)
}

pub fn length_report<T: ChosenRejected + Sync>(
    items: &[T],
    bins: Option<&[f64]>,
) -> Result<LengthReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    let lens: Vec<(usize, usize)> = items
        .par_iter()
        .map(|it| {
            let (c, r) = it.chosen_rejected();
            (token_count(c), token_count(r))
        })
        .collect();
    let bins = match bins {
        Some(b) => {
            if b.is_empty() || b.iter().any(|e| !e.is_finite()) || b.windows(2).any(|w| w[0] >= w[1]) {
                return Err(MetricsError::Bins);
            }
            b.to_vec()
        }
        None => {
            let all: Vec<usize> = lens.iter().flat_map(|&(c, r)| [c, r]).collect();
            default_bins(&all)
        }
    };
    let mut chosen_hist = vec![0; bins.len()];
    let mut rejected_hist = vec![0; bins.len()];
    let (mut sum_c, mut sum_r) = (0usize, 0usize);
    let (mut longer, mut shorter) = (0usize, 0usize);
    for &(c, r) in &lens {
        chosen_hist[bin_of(&bins, c as f64)] += 1;
        rejected_hist[bin_of(&bins, r as f64)] += 1;
        sum_c += c;
        sum_r += r;
        match c.cmp(&r) {
            std::cmp::Ordering::Greater => longer += 1,
            std::cmp::Ordering::Less => shorter += 1,
            std::cmp::Ordering::Equal => {}
        }
    }
    let n = lens.len();
    let nf = n as f64;
    Ok(LengthReport {
        bins,
        chosen_hist,
        rejected_hist,
        mean_chosen: sum_c as f64 / nf,
        mean_rejected: sum_r as f64 / nf,
        longer_fraction: longer as f64 / nf,
        shorter_fraction: shorter as f64 / nf,
        equal_fraction: (n - longer - shorter) as f64 / nf,
        n,
    })
}

impl LengthReport {
    /// Scalar summary as a one-row report.
    pub fn summary(&self, name: &str) -> Report {
        let mut row = Record::new();
        row.insert("n".into(), Value::Int(self.n as i64));
        row.insert("mean_chosen".into(), Value::Float(self.mean_chosen));
        row.insert("mean_rejected".into(), Value::Float(self.mean_rejected));
        row.insert("longer_fraction".into(), Value::Float(self.longer_fraction));
        row.insert("shorter_fraction".into(), Value::Float(self.shorter_fraction));
        row.insert("equal_fraction".into(), Value::Float(self.equal_fraction));
        let cols = ["n", "mean_chosen", "mean_rejected", "longer_fraction", "shorter_fraction", "equal_fraction"];
        Report::with_columns(name, &cols, vec![row])
    }

    /// One row per bin: `bin_lo`, `bin_hi` (empty for overflow), counts.
    pub fn histogram(&self, name: &str) -> Report {
        let rows = (0..self.bins.len())
            .map(|j| {
                let mut row = Record::new();
                row.insert("bin_lo".into(), Value::Float(self.bins[j]));
                row.insert(
                    "bin_hi".into(),
                    self.bins.get(j + 1).map_or(Value::Null, |v| Value::Float(*v)),
                );
                row.insert("chosen".into(), Value::Int(self.chosen_hist[j] as i64));
                row.insert("rejected".into(), Value::Int(self.rejected_hist[j] as i64));
                row
            })
            .collect();
        Report::with_columns(name, &["bin_lo", "bin_hi", "chosen", "rejected"], rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

pub type Record = BTreeMap<String, Value>;

/// A named table of records.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Record>,
}

impl Report {
    pub fn new(name: &str, rows: Vec<Record>) -> Self {
        Self::with_columns(name, &[], rows)
    }

    /// Header is `columns` in the given order, then any other row keys sorted.
    pub fn with_columns(name: &str, columns: &[&str], rows: Vec<Record>) -> Self {
        let mut cols: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        let mut extra: Vec<String> = rows
            .iter()
            .flat_map(|r| r.keys())
            .filter(|k| !columns.contains(&k.as_str()))
            .cloned()
            .collect();
        extra.sort();
        extra.dedup();
        cols.extend(extra);
        Report {
            name: name.to_string(),
            columns: cols,
            rows,
        }
    }

    /// Rows from serializable structs with scalar fields.
    /// Rows from structs; columns follow field order.
    pub fn from_serializable<T: Serialize>(name: &str, items: &[T]) -> Result<Self, MetricsError> {
        let mut order: Vec<String> = Vec::new();
        let rows = items
            .iter()
            .map(|it| match serde_json::to_value(it) {
                Ok(serde_json::Value::Object(map)) => map
                    .into_iter()
                    .inspect(|(k, _)| {
                        if !order.contains(k) {
                            order.push(k.clone());
                        }
                    })
                    .map(|(k, v)| Ok((k.clone(), from_json(&k, v)?)))
                    .collect::<Result<Record, MetricsError>>(),
                _ => Err(MetricsError::NotScalar(name.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cols: Vec<&str> = order.iter().map(String::as_str).collect();
        Ok(Self::with_columns(name, &cols, rows))
    }
}

fn from_json(key: &str, v: serde_json::Value) -> Result<Value, MetricsError> {
    Ok(match v {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) if !n.is_f64() => Value::Int(i),
            _ => Value::Float(n.as_f64().unwrap_or(f64::NAN)),
        },
        serde_json::Value::String(s) => Value::Text(s),
        _ => return Err(MetricsError::NotScalar(key.to_string())),
    })
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp) as usize, x))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa.to_string()), exp.abs())
    }
}

/// Value after a trip through the 6-digit text form.
pub fn round_sig6(x: f64) -> f64 {
    format_sig6(x).parse().unwrap_or(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    /// Tab-separated table with a header row.
    Tsv,
    /// One JSON object per line after a `{"columns": [...], "report": name}` header.
    Jsonl,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Tsv => "tsv",
            ReportFormat::Jsonl => "jsonl",
        }
    }
}

/// `{dir}/{experiment}.{metric}.{ext}`.
pub fn report_path(dir: &Path, experiment: &str, metric: &str, format: ReportFormat) -> PathBuf {
    dir.join(format!("{experiment}.{metric}.{}", format.extension()))
}

fn tsv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) => format_sig6(*f),
        Value::Text(s) => s.replace(['\t', '\n', '\r'], " "),
    }
}

fn json_value(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) if !f.is_finite() => "null".into(),
        Value::Float(f) => {
            let s = format_sig6(*f);
            if s.contains(['.', 'e']) {
                s
            } else {
                format!("{s}.0")
            }
        }
        Value::Text(s) => serde_json::to_string(s).expect("string serializes"),
    }
}

/// Render a report. Output depends only on the report contents.
pub fn render_report(report: &Report, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            out.push_str(&report.columns.join("\t"));
            out.push('\n');
            for row in &report.rows {
                let cells: Vec<String> = report
                    .columns
                    .iter()
                    .map(|c| row.get(c).map_or_else(String::new, tsv_cell))
                    .collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
        }
        ReportFormat::Jsonl => {
            let header = serde_json::json!({ "columns": report.columns, "report": report.name });
            out.push_str(&header.to_string());
            out.push('\n');
            for row in &report.rows {
                let fields: Vec<String> = row
                    .iter()
                    .map(|(k, v)| format!("{}:{}", serde_json::to_string(k).expect("key"), json_value(v)))
                    .collect();
                out.push('{');
                out.push_str(&fields.join(","));
                out.push_str("}\n");
            }
        }
    }
    out
}

pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<(), MetricsError> {
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(render_report(report, format).as_bytes()).map_err(io)?;
    Ok(())
}

/// Parse a JSONL report written by [`emit_report`].
pub fn parse_jsonl_report<R: BufRead>(r: R) -> Result<Report, MetricsError> {
    let mut lines = r.lines().enumerate();
    let perr = |line: usize, message: String| MetricsError::Parse { line, message };
    let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    let header: serde_json::Value =
        serde_json::from_str(&header.map_err(|e| perr(1, e.to_string()))?).map_err(|e| perr(1, e.to_string()))?;
    let name = header["report"].as_str().unwrap_or_default().to_string();
    let columns: Vec<String> = header["columns"]
        .as_array()
        .ok_or_else(|| perr(1, "header lacks columns".into()))?
        .iter()
        .filter_map(|c| c.as_str().map(str::to_string))
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| perr(i + 1, e.to_string()))?;
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&line).map_err(|e| perr(i + 1, e.to_string()))?;
        rows.push(
            map.into_iter()
                .map(|(k, v)| Ok((k.clone(), from_json(&k, v)?)))
                .collect::<Result<Record, MetricsError>>()?,
        );
    }
    Ok(Report { name, columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmenter::{PrefLabel, Provenance, ResponseOrigin, Role};

    fn ex(c: &str, r: &str) -> PreferenceExample {
        PreferenceExample::new("i", "p", c, r)
    }

    #[test]
    fn all_longer() {
        let data = vec![ex("a b c", "a"), ex("a b", "a")];
        let rep = length_report(&data, None).unwrap();
        assert_eq!(rep.longer_fraction, 1.0);
        assert_eq!(rep.mean_chosen, 2.5);
    }

    #[test]
    fn identical_texts() {
        let data = vec![ex("x y", "x y"), ex("z", "z"), ex("a b c d", "a b c d")];
        let rep = length_report(&data, Some(&[0.0, 2.0, 4.0])).unwrap();
        assert_eq!(rep.equal_fraction, 1.0);
        assert_eq!(rep.chosen_hist, rep.rejected_hist);
        assert_eq!(rep.chosen_hist, vec![1, 1, 1]);
    }

    #[test]
    fn errors() {
        let empty: Vec<PreferenceExample> = Vec::new();
        assert!(matches!(length_report(&empty, None), Err(MetricsError::Empty)));
        assert!(matches!(
            length_report(&[ex("a", "b")], Some(&[0.0, 0.0])),
            Err(MetricsError::Bins)
        ));
    }

    #[test]
    fn default_bins_cover_p99() {
        let lens: Vec<usize> = (1..=100).collect();
        let b = default_bins(&lens);
        assert_eq!(b.len(), 9);
        assert_eq!(b[8], 99.0);
        assert_eq!(b[1], 99.0 / 8.0);
    }

    #[test]
    fn candidate_ties_use_first_response() {
        let c = CandidateTriplet {
            id: "c".into(),
            prompt_id: "p".into(),
            prompt: "p".into(),
            response_a: "one".into(),
            response_b: "two words".into(),
            a_origin: ResponseOrigin::new("x", Role::W),
            b_origin: ResponseOrigin::new("y", Role::W),
            label: PrefLabel::TIE,
            provenance: Provenance::Neutral,
        };
        assert_eq!(c.chosen_rejected(), ("one", "two words"));
        let flipped = CandidateTriplet { label: PrefLabel::SECOND, ..c };
        assert_eq!(flipped.chosen_rejected(), ("two words", "one"));
    }

    #[test]
    fn sig6_formatting() {
        for (x, s) in [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333"),
            (123456.7, "123457"),
            (1234567.0, "1.23457e+06"),
            (-2.5e-7, "-2.5e-07"),
            (0.000123456789, "0.000123457"),
            (999999.6, "1e+06"),
            (f64::NAN, "nan"),
        ] {
            assert_eq!(format_sig6(x), s, "{x}");
        }
    }

    fn sample_report() -> Report {
        let rows = (0..3)
            .map(|i| {
                let mut r = Record::new();
                r.insert("rate".into(), Value::Float(0.1 * (i + 1) as f64));
                r.insert("count".into(), Value::Int(i * 10));
                r.insert("label".into(), Value::Text(format!("row \"{i}\"")));
                r.insert("whole".into(), Value::Float(3.0));
                r
            })
            .collect();
        Report::new("curve", rows)
    }

    #[test]
    fn tsv_layout_and_stability() {
        let text = render_report(&sample_report(), ReportFormat::Tsv);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "count\tlabel\trate\twhole");
        assert_eq!(lines.next().unwrap(), "0\trow \"0\"\t0.1\t3");
        assert_eq!(text, render_report(&sample_report(), ReportFormat::Tsv));
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = Report::with_columns("x", &["b", "a"], vec![]);
        assert_eq!(render_report(&r, ReportFormat::Tsv), "b\ta\n");
        let j = render_report(&r, ReportFormat::Jsonl);
        assert_eq!(j.lines().count(), 1);
        assert_eq!(parse_jsonl_report(j.as_bytes()).unwrap(), r);
    }

    #[test]
    fn jsonl_round_trip() {
        let r = sample_report();
        let back = parse_jsonl_report(render_report(&r, ReportFormat::Jsonl).as_bytes()).unwrap();
        assert_eq!(back.columns, r.columns);
        for (a, b) in back.rows.iter().zip(&r.rows) {
            for (k, v) in b {
                let expected = match v {
                    Value::Float(f) => Value::Float(round_sig6(*f)),
                    other => other.clone(),
                };
                assert_eq!(a[k], expected, "{k}");
            }
        }
    }

    #[test]
    fn from_serializable_rows() {
        #[derive(Serialize)]
        struct Row {
            rate: f64,
            count: usize,
        }
        let r = Report::from_serializable("t", &[Row { rate: 0.5, count: 3 }]).unwrap();
        assert_eq!(r.rows[0]["count"], Value::Int(3));
        assert_eq!(r.rows[0]["rate"], Value::Float(0.5));
        assert_eq!(r.columns, ["rate", "count"]);
        #[derive(Serialize)]
        struct Nested {
            v: Vec<u8>,
        }
        assert!(Report::from_serializable("t", &[Nested { v: vec![1] }]).is_err());
    }

    #[test]
    fn unwritable_path() {
        let r = sample_report();
        let err = emit_report(&r, Path::new("/nonexistent-dir/x.tsv"), ReportFormat::Tsv);
        assert!(matches!(err, Err(MetricsError::Io { .. })));
    }
}
