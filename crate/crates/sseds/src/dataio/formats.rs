//! Raw log parsers for the Criteo and Avazu formats.
//!
//! Criteo: headerless TSV, 40 columns = label, 13 numeric, 26 categorical
//! hex strings; empty string means missing.
//! Avazu: CSV with header; after the `id` column comes the `click` label and
//! 22 categorical columns.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dataio::transform::{bucket_token, transform_numeric, NumericTransform};
use crate::dataio::{FieldKind, FieldSchema, Schema};
use crate::error::{Error, Result};

pub const CRITEO_NUMERIC_FIELDS: usize = 13;
pub const CRITEO_CATEGORICAL_FIELDS: usize = 26;
pub const AVAZU_FIELDS: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawFormat {
    Criteo,
    Avazu,
    Synth,
}

/// A parsed but not yet vocabulary-encoded row. Numeric fields have already
/// been bucketed into token strings; `None` means missing.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub tokens: Vec<Option<String>>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct RawDataset {
    pub schema: Schema,
    pub rows: Vec<RawRow>,
    pub skipped: usize,
}

pub fn criteo_schema() -> Schema {
    let mut fields = Vec::new();
    for i in 0..CRITEO_NUMERIC_FIELDS {
        fields.push(FieldSchema {
            field_id: i,
            kind: FieldKind::Numeric,
            name: format!("I{}", i + 1),
        });
    }
    for i in 0..CRITEO_CATEGORICAL_FIELDS {
        fields.push(FieldSchema {
            field_id: CRITEO_NUMERIC_FIELDS + i,
            kind: FieldKind::Categorical,
            name: format!("C{}", i + 1),
        });
    }
    Schema { fields }
}

pub fn avazu_schema(header: &[String]) -> Schema {
    Schema {
        fields: header
            .iter()
            .enumerate()
            .map(|(i, name)| FieldSchema {
                field_id: i,
                kind: FieldKind::Categorical,
                name: name.clone(),
            })
            .collect(),
    }
}

fn parse_label(s: &str, line: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::data(format!("line {line}: bad label {s:?}"))),
    }
}

/// Parse Criteo TSV from a reader. In strict mode a malformed row aborts
/// with its line number; in lenient mode it is skipped and counted.
pub fn parse_criteo<R: BufRead>(
    reader: R,
    transform: NumericTransform,
    strict: bool,
) -> Result<RawDataset> {
    let schema = criteo_schema();
    let expect_cols = 1 + CRITEO_NUMERIC_FIELDS + CRITEO_CATEGORICAL_FIELDS;
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        match parse_criteo_row(&line, expect_cols, transform, lineno) {
            Ok(row) => rows.push(row),
            Err(e) if strict => return Err(e),
            Err(_) => skipped += 1,
        }
    }
    Ok(RawDataset { schema, rows, skipped })
}

fn parse_criteo_row(
    line: &str,
    expect_cols: usize,
    transform: NumericTransform,
    lineno: usize,
) -> Result<RawRow> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != expect_cols {
        return Err(Error::data(format!(
            "line {lineno}: expected {expect_cols} columns, got {}",
            cols.len()
        )));
    }
    let label = parse_label(cols[0], lineno)?;
    let mut tokens = Vec::with_capacity(expect_cols - 1);
    for &c in &cols[1..=CRITEO_NUMERIC_FIELDS] {
        if c.is_empty() {
            tokens.push(None);
        } else {
            let x: f64 = c
                .parse()
                .map_err(|_| Error::data(format!("line {lineno}: bad numeric {c:?}")))?;
            let bucket = transform_numeric(x, transform)
                .map_err(|e| Error::data(format!("line {lineno}: {e}")))?;
            tokens.push(Some(bucket_token(bucket)));
        }
    }
    for &c in &cols[1 + CRITEO_NUMERIC_FIELDS..] {
        tokens.push(if c.is_empty() { None } else { Some(c.to_string()) });
    }
    Ok(RawRow { tokens, label })
}

/// Parse Avazu CSV (with header) from a reader.
pub fn parse_avazu<R: BufRead>(reader: R, strict: bool) -> Result<RawDataset> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| Error::data(format!("avazu header: {e}")))?
        .clone();
    if headers.len() < 3 {
        return Err(Error::data("avazu: header too short"));
    }
    let label_col = headers
        .iter()
        .position(|h| h == "click")
        .ok_or_else(|| Error::data("avazu: no 'click' column"))?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != 0 && i != label_col)
        .collect();
    let names: Vec<String> = feature_cols.iter().map(|&i| headers[i].to_string()).collect();
    let schema = avazu_schema(&names);

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (idx, rec) in csv_reader.records().enumerate() {
        let lineno = idx + 2; // 1-based, after header
        let parse = || -> Result<RawRow> {
            let rec = rec
                .as_ref()
                .map_err(|e| Error::data(format!("line {lineno}: {e}")))?;
            if rec.len() != headers.len() {
                return Err(Error::data(format!(
                    "line {lineno}: expected {} columns, got {}",
                    headers.len(),
                    rec.len()
                )));
            }
            let label = parse_label(&rec[label_col], lineno)?;
            let tokens = feature_cols
                .iter()
                .map(|&i| {
                    let v = &rec[i];
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.to_string())
                    }
                })
                .collect();
            Ok(RawRow { tokens, label })
        };
        match parse() {
            Ok(row) => rows.push(row),
            Err(e) if strict => return Err(e),
            Err(_) => skipped += 1,
        }
    }
    Ok(RawDataset { schema, rows, skipped })
}

/// Count tokens over the given rows (training split only) and build
/// per-field vocabularies. Missing values contribute no counts; they encode
/// to the "others" bucket.
pub fn build_vocab_from_rows(
    rows: &[&RawRow],
    num_fields: usize,
    min_freq: u64,
) -> Result<crate::dataio::Vocabulary> {
    let mut counts: Vec<std::collections::HashMap<String, u64>> =
        vec![Default::default(); num_fields];
    for row in rows {
        for (i, tok) in row.tokens.iter().enumerate() {
            if let Some(t) = tok {
                *counts[i].entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    let fields = counts
        .iter()
        .map(|c| crate::dataio::build_field_vocab(c, min_freq))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::dataio::Vocabulary { fields })
}

/// Encode raw rows against a vocabulary. Unseen and missing tokens map to
/// the "others" id.
pub fn encode_rows(rows: &[&RawRow], vocab: &crate::dataio::Vocabulary) -> Vec<crate::dataio::Record> {
    rows.iter()
        .map(|row| crate::dataio::Record {
            tokens: row
                .tokens
                .iter()
                .enumerate()
                .map(|(i, tok)| match tok {
                    Some(t) => vocab.fields[i].encode(t),
                    None => crate::dataio::OTHERS_ID,
                })
                .collect(),
            label: row.label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn criteo_line(label: u8) -> String {
        let mut cols = vec![label.to_string()];
        for i in 0..CRITEO_NUMERIC_FIELDS {
            cols.push(if i == 3 { String::new() } else { (i * 7).to_string() });
        }
        for i in 0..CRITEO_CATEGORICAL_FIELDS {
            cols.push(format!("{:08x}", i * 1234567));
        }
        cols.join("\t")
    }

    #[test]
    fn criteo_row_parses_39_fields_plus_label() {
        let data = format!("{}\n{}\n", criteo_line(1), criteo_line(0));
        let raw = parse_criteo(Cursor::new(data), NumericTransform::SquaredLn, true).unwrap();
        assert_eq!(raw.schema.num_fields(), 39);
        assert_eq!(raw.rows.len(), 2);
        assert_eq!(raw.rows[0].label, 1);
        // missing numeric column 4
        assert!(raw.rows[0].tokens[3].is_none());
        // numeric column 0 -> bucket of 0
        assert_eq!(raw.rows[0].tokens[0].as_deref(), Some("0"));
    }

    #[test]
    fn criteo_strict_mode_names_bad_line() {
        let data = format!("{}\nnot\tenough\tcolumns\n", criteo_line(1));
        let err = parse_criteo(Cursor::new(data), NumericTransform::SquaredLn, true).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn criteo_lenient_mode_counts_skips() {
        let data = format!("{}\nbad\trow\n{}\n", criteo_line(1), criteo_line(0));
        let raw = parse_criteo(Cursor::new(data), NumericTransform::SquaredLn, false).unwrap();
        assert_eq!(raw.rows.len(), 2);
        assert_eq!(raw.skipped, 1);
    }

    #[test]
    fn avazu_parses_header_and_label() {
        let data = "id,click,hour,banner_pos\n10001,1,14102100,0\n10002,0,14102101,1\n";
        let raw = parse_avazu(Cursor::new(data), true).unwrap();
        assert_eq!(raw.schema.num_fields(), 2);
        assert_eq!(raw.schema.fields[0].name, "hour");
        assert_eq!(raw.rows[0].label, 1);
        assert_eq!(raw.rows[1].tokens[1].as_deref(), Some("1"));
    }
}
