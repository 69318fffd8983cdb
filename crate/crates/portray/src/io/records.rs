//! Structured-text records for keypoints, coefficients and schedules.
//!
//! A record is three lines:
//! ```text
//! kind=face_coeffs
//! shape=30 22
//! values=0.1 0.2 ...
//! ```
//! Values are row-major f64, printed with Rust's shortest round-trip
//! formatting, so dump -> load is bit-exact. Records in one file are
//! separated by blank lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Record {
    pub fn new(kind: &str, shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { kind: kind.to_string(), shape: shape.to_vec(), values }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "kind={}", self.kind).unwrap();
        let shape: Vec<String> = self.shape.iter().map(|s| s.to_string()).collect();
        writeln!(out, "shape={}", shape.join(" ")).unwrap();
        let values: Vec<String> = self.values.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "values={}", values.join(" ")).unwrap();
        out
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let text: Vec<String> = records.iter().map(Record::to_text).collect();
    std::fs::write(path, text.join("\n"))?;
    Ok(())
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    let mut kind: Option<String> = None;
    let mut shape: Option<Vec<usize>> = None;
    let mut values: Option<Vec<f64>> = None;
    for line in text.lines().chain(std::iter::once("")) {
        let line = line.trim();
        if line.is_empty() {
            match (kind.take(), shape.take(), values.take()) {
                (None, None, None) => {}
                (Some(k), Some(s), Some(v)) => {
                    if s.iter().product::<usize>() != v.len() {
                        return Err(Error::Format(format!(
                            "record '{k}': shape {s:?} does not match {} values",
                            v.len()
                        )));
                    }
                    out.push(Record { kind: k, shape: s, values: v });
                }
                _ => return Err(Error::Format("incomplete record".into())),
            }
            continue;
        }
        let (key, rest) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad record line: {line}")))?;
        match key {
            "kind" => kind = Some(rest.to_string()),
            "shape" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    rest.split_whitespace().map(str::parse).collect();
                shape =
                    Some(parsed.map_err(|_| Error::Format(format!("bad shape: {rest}")))?);
            }
            "values" => {
                let parsed: std::result::Result<Vec<f64>, _> =
                    rest.split_whitespace().map(str::parse).collect();
                values =
                    Some(parsed.map_err(|_| Error::Format(format!("bad values in record")))?);
            }
            other => return Err(Error::Format(format!("unknown record key: {other}"))),
        }
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    parse_records(&std::fs::read_to_string(path)?)
}

/// First record of a given kind, or a format error naming it.
pub fn find_record<'a>(records: &'a [Record], kind: &str) -> Result<&'a Record> {
    records
        .iter()
        .find(|r| r.kind == kind)
        .ok_or_else(|| Error::Format(format!("missing record '{kind}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let rec = Record::new(
            "keypoints.head_explicit",
            &[2, 3],
            vec![0.1, -2.5e-17, 3.0, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0],
        );
        let parsed = parse_records(&rec.to_text()).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].kind, rec.kind);
        assert_eq!(parsed[0].shape, rec.shape);
        for (a, b) in parsed[0].values.iter().zip(&rec.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn multiple_records() {
        let a = Record::new("a", &[2], vec![1.0, 2.0]);
        let b = Record::new("b", &[1], vec![3.0]);
        let text = format!("{}\n{}", a.to_text(), b.to_text());
        let parsed = parse_records(&text).unwrap();
        assert_eq!(parsed, vec![a, b]);
    }

    #[test]
    fn shape_value_mismatch_rejected() {
        let text = "kind=x\nshape=2 2\nvalues=1 2 3\n";
        assert!(parse_records(text).is_err());
    }
}
