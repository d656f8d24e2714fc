use std::path::Path;

use chrono::{Days, NaiveDate};

use super::series::{RawSeries, VariableSpec};
use super::{DataError, DataResult};
use crate::util::atomic_write;

/// Reads one variable's daily series from a CSV file with header
/// `date,<c1>[,<c2>...]`. Dates must be ISO-8601 and strictly consecutive.
pub fn ingest_csv(path: &Path, spec: &VariableSpec) -> DataResult<RawSeries> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse_err = |row: usize, detail: String| DataError::Parse {
        path: path.to_path_buf(),
        row,
        detail,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => parse_err(0, format!("{other:?}")),
        })?;

    let header_len = reader
        .headers()
        .map_err(|e| parse_err(0, e.to_string()))?
        .len();
    if header_len != spec.channel_count + 1 {
        return Err(parse_err(
            0,
            format!(
                "expected {} columns (date plus {} channels), got {}",
                spec.channel_count + 1,
                spec.channel_count,
                header_len
            ),
        ));
    }

    let mut start_date: Option<NaiveDate> = None;
    let mut expected: Option<NaiveDate> = None;
    let mut values: Vec<f64> = Vec::new();
    // Header occupies line 1; data rows are numbered from 2.
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != spec.channel_count + 1 {
            return Err(parse_err(
                row,
                format!("expected {} fields, got {}", spec.channel_count + 1, record.len()),
            ));
        }
        let date: NaiveDate = record[0]
            .parse()
            .map_err(|_| parse_err(row, format!("invalid date '{}'", &record[0])))?;
        match expected {
            None => start_date = Some(date),
            Some(want) => {
                if date > want {
                    return Err(DataError::Gap {
                        series: spec.name.clone(),
                        date: want,
                    });
                }
                if date < want {
                    return Err(parse_err(
                        row,
                        format!("date {date} is out of order (expected {want})"),
                    ));
                }
            }
        }
        expected = Some(date + Days::new(1));
        for field in record.iter().skip(1) {
            let value: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("non-numeric value '{field}'")))?;
            if !value.is_finite() {
                return Err(parse_err(row, format!("non-finite value '{field}'")));
            }
            values.push(value);
        }
    }

    let Some(start_date) = start_date else {
        return Err(DataError::EmptyFile {
            path: path.to_path_buf(),
        });
    };
    RawSeries::new(&spec.name, spec.channel_count, start_date, values)
}

/// Writes a daily series as CSV in the same format [`ingest_csv`] reads.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_csv(
    path: &Path,
    name: &str,
    start_date: NaiveDate,
    channel_count: usize,
    values: &[f64],
) -> DataResult<()> {
    debug_assert!(channel_count >= 1 && values.len().is_multiple_of(channel_count));
    let mut buf = Vec::new();
    {
        let mut writer = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["date".to_string()];
        if channel_count == 1 {
            header.push(name.to_string());
        } else {
            header.extend((1..=channel_count).map(|c| format!("{name}_{c}")));
        }
        writer
            .write_record(&header)
            .expect("writing to a Vec cannot fail");
        for (d, row) in values.chunks(channel_count).enumerate() {
            let mut record = vec![(start_date + Days::new(d as u64)).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            writer
                .write_record(&record)
                .expect("writing to a Vec cannot fail");
        }
        writer.flush().expect("writing to a Vec cannot fail");
    }
    atomic_write(path, &buf).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
