//! Loss-record ingestion: CSV with a header row, UTF-8, `.` decimal
//! separator.
//!
//! The one required column is `loss_amount` (positive real). Recognized
//! optional columns: `business_line`, `event_type`, `settlement_date`,
//! `organization`, `region`; the first two can drive record filtering so
//! a single file holding a whole loss database can be fitted cell by
//! cell. Anything else is carried but ignored.
//!
//! Malformed rows never abort a run: each one is rejected with a
//! line-numbered note and the remainder is kept. Only a file that yields
//! zero usable records is an error.

use std::path::Path;

use gpdrobust::sample::LossSample;

use crate::Failure;

/// What ingestion found, with full bookkeeping for the output header.
#[derive(Debug)]
pub struct Ingested {
    pub sample: LossSample,
    /// One line-numbered note per rejected row.
    pub warnings: Vec<String>,
    /// Data rows the reader yielded (before any rejection/filtering).
    pub rows_read: usize,
    /// Rows dropped as malformed (unparseable, nonpositive, wrong shape).
    pub rows_rejected: usize,
    /// Well-formed rows dropped by --business-line/--event-type.
    pub rows_filtered: usize,
}

fn data_err(msg: impl Into<String>) -> Failure {
    Failure::Data(msg.into())
}

/// Read `path`, keeping rows that pass the filters and carry a positive,
/// finite `loss_amount`.
pub fn ingest(
    path: &Path,
    business_line: Option<&str>,
    event_type: Option<&str>,
) -> Result<Ingested, Failure> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| data_err(format!("{}: cannot read header row: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);

    let loss_col = col("loss_amount").ok_or_else(|| {
        data_err(format!(
            "{}: required column loss_amount is missing (found: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let bl_col = col("business_line");
    let et_col = col("event_type");
    if business_line.is_some() && bl_col.is_none() {
        return Err(data_err(format!(
            "{}: --business-line given but the file has no business_line column",
            path.display()
        )));
    }
    if event_type.is_some() && et_col.is_none() {
        return Err(data_err(format!(
            "{}: --event-type given but the file has no event_type column",
            path.display()
        )));
    }

    let mut values = Vec::new();
    let mut warnings = Vec::new();
    let mut rows_read = 0usize;
    let mut rows_rejected = 0usize;
    let mut rows_filtered = 0usize;

    for record in reader.records() {
        rows_read += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rows_rejected += 1;
                let line = e
                    .position()
                    .map(|p| p.line().to_string())
                    .unwrap_or_else(|| "?".into());
                warnings.push(format!("row {line}: malformed record: {e}"));
                continue;
            }
        };
        let line = record
            .position()
            .map(|p| p.line().to_string())
            .unwrap_or_else(|| "?".into());

        if let (Some(want), Some(i)) = (business_line, bl_col) {
            match record.get(i) {
                Some(have) if have == want => {}
                _ => {
                    rows_filtered += 1;
                    continue;
                }
            }
        }
        if let (Some(want), Some(i)) = (event_type, et_col) {
            match record.get(i) {
                Some(have) if have == want => {}
                _ => {
                    rows_filtered += 1;
                    continue;
                }
            }
        }

        let raw = match record.get(loss_col) {
            Some(s) => s.trim(),
            None => {
                rows_rejected += 1;
                warnings.push(format!("row {line}: no loss_amount field"));
                continue;
            }
        };
        match raw.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => values.push(v),
            Ok(v) => {
                rows_rejected += 1;
                warnings.push(format!("row {line}: nonpositive loss_amount {v}"));
            }
            Err(_) => {
                rows_rejected += 1;
                warnings.push(format!("row {line}: loss_amount {raw:?} is not a number"));
            }
        }
    }

    if values.is_empty() {
        return Err(data_err(format!(
            "{}: no usable loss records ({rows_read} rows read, {rows_rejected} rejected, \
             {rows_filtered} filtered out)",
            path.display()
        )));
    }

    let sample = LossSample::new(values, path.display().to_string())
        .map_err(|e| data_err(e.to_string()))?;
    Ok(Ingested {
        sample,
        warnings,
        rows_read,
        rows_rejected,
        rows_filtered,
    })
}
