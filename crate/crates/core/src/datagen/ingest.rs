//! Loading externally annotated responses for detector training.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DatagenError;

/// Largest tolerated share of malformed lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// A response with a binary hallucination label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub id: String,
    pub source: String,
    pub response: String,
    /// `true` when the response contains a hallucination.
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub records: Vec<LabeledRecord>,
    pub malformed: Vec<MalformedLine>,
    pub positives: usize,
    pub negatives: usize,
    /// Set when the file held no lines at all.
    pub empty: bool,
}

fn string_field(obj: &serde_json::Map<String, Value>, names: &[&str]) -> Option<String> {
    names
        .iter()
        .find_map(|n| obj.get(*n).and_then(Value::as_str))
        .map(str::to_string)
}

/// Reads a label from `label` (boolean or 0/1), or reduces a span list
/// (`labels` or `hallucination_spans`) to "any span present".
fn label_field(obj: &serde_json::Map<String, Value>) -> Result<bool, String> {
    if let Some(v) = obj.get("label") {
        return match v {
            Value::Bool(b) => Ok(*b),
            Value::Number(n) if n.as_u64() == Some(0) => Ok(false),
            Value::Number(n) if n.as_u64() == Some(1) => Ok(true),
            other => Err(format!("label must be a boolean or 0/1, got {other}")),
        };
    }
    for key in ["labels", "hallucination_spans"] {
        if let Some(v) = obj.get(key) {
            return match v {
                Value::Array(spans) => Ok(!spans.is_empty()),
                other => Err(format!("{key} must be a list, got {other}")),
            };
        }
    }
    Err("missing label".into())
}

fn parse_line(line: &str, line_no: usize) -> Result<LabeledRecord, String> {
    let v: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = v.as_object().ok_or("line is not a JSON object")?;
    let source = string_field(obj, &["source", "source_info", "text"]).ok_or("missing source")?;
    let response = string_field(obj, &["response", "output"]).ok_or("missing response")?;
    if response.trim().is_empty() {
        return Err("empty response".into());
    }
    let label = label_field(obj)?;
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("line-{line_no}"),
    };
    Ok(LabeledRecord {
        id,
        source,
        response,
        label,
    })
}

/// Parses annotated JSON lines. Bad lines are collected in the report; more
/// than 10% bad lines is an error.
pub fn parse_annotated(content: &str, path: &str) -> Result<IngestReport, DatagenError> {
    let mut report = IngestReport::default();
    let mut total = 0;
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line, i + 1) {
            Ok(r) => {
                if r.label {
                    report.positives += 1;
                } else {
                    report.negatives += 1;
                }
                report.records.push(r);
            }
            Err(reason) => report.malformed.push(MalformedLine { line: i + 1, reason }),
        }
    }
    if total == 0 {
        log::warn!("{path}: no records");
        report.empty = true;
        return Ok(report);
    }
    if report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(DatagenError::TooManyMalformed {
            path: path.to_string(),
            malformed: report.malformed.len(),
            total,
        });
    }
    for m in &report.malformed {
        log::warn!("{path}:{}: skipped: {}", m.line, m.reason);
    }
    log::info!(
        "{path}: {} records ({} hallucinated, {} clean), {} malformed",
        report.records.len(),
        report.positives,
        report.negatives,
        report.malformed.len()
    );
    Ok(report)
}

pub fn ingest_annotated(path: &Path) -> Result<IngestReport, DatagenError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatagenError::Io {
        path: p.clone(),
        source,
    })?;
    let mut content = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DatagenError::Io {
            path: p.clone(),
            source,
        })?;
        content.push_str(&line);
        content.push('\n');
    }
    parse_annotated(&content, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_no_records_and_a_flag() {
        let r = parse_annotated("", "x").unwrap();
        assert!(r.records.is_empty());
        assert!(r.empty);
    }

    #[test]
    fn missing_label_is_malformed() {
        let mut lines = vec![r#"{"source":"s","response":"r"}"#.to_string()];
        for i in 0..10 {
            lines.push(format!(r#"{{"id":{i},"source":"s","response":"r","label":{}}}"#, i % 2));
        }
        let r = parse_annotated(&lines.join("\n"), "x").unwrap();
        assert_eq!(r.records.len(), 10);
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].line, 1);
        assert_eq!(r.malformed[0].reason, "missing label");
        assert_eq!((r.positives, r.negatives), (5, 5));
    }

    #[test]
    fn span_lists_reduce_to_binary() {
        let text = "{\"source\":\"s\",\"response\":\"r\",\"labels\":[{\"start\":0,\"end\":1}]}\n\
                    {\"source\":\"s\",\"response\":\"r\",\"hallucination_spans\":[]}";
        let r = parse_annotated(text, "x").unwrap();
        assert!(r.records[0].label);
        assert!(!r.records[1].label);
    }

    #[test]
    fn too_many_malformed_lines_abort() {
        let text = "not json\n{\"source\":\"s\",\"response\":\"r\",\"label\":true}";
        assert!(matches!(
            parse_annotated(text, "x"),
            Err(DatagenError::TooManyMalformed {
                malformed: 1,
                total: 2,
                ..
            })
        ));
    }
}
