use std::path::Path;

use super::MultivariateSeries;
use crate::error::{CoraError, Result};
use crate::io::write_atomic;

/// Which columns to read. `channels: None` takes every column after the date.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub date_column: String,
    pub channels: Option<Vec<String>>,
    /// Minimum number of data rows, usually `L + F`.
    pub min_rows: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date_column: "date".into(),
            channels: None,
            min_rows: 1,
        }
    }
}

/// Read a `date,<channel>,...` file. Row numbers in errors count data rows from 1.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let date_idx = headers
        .iter()
        .position(|h| *h == schema.date_column)
        .ok_or_else(|| CoraError::Data(format!("{}: missing date column `{}`", path.display(), schema.date_column)))?;
    let channels: Vec<String> = match &schema.channels {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != date_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if channels.is_empty() {
        return Err(CoraError::Data(format!("{}: no channel columns", path.display())));
    }
    let idx: Vec<usize> = channels
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| CoraError::Data(format!("{}: missing column `{c}`", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut values = vec![Vec::new(); channels.len()];
    let mut stamps = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        stamps.push(rec.get(date_idx).unwrap_or("").trim().to_string());
        for (k, &ci) in idx.iter().enumerate() {
            let cell = rec.get(ci).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| CoraError::Cell {
                path: path.to_path_buf(),
                row,
                column: channels[k].clone(),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(CoraError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: channels[k].clone(),
                    message: "value is not finite".into(),
                });
            }
            values[k].push(v);
        }
    }
    if stamps.len() < schema.min_rows.max(1) {
        return Err(CoraError::Data(format!(
            "{}: {} rows, need at least {}",
            path.display(),
            stamps.len(),
            schema.min_rows.max(1)
        )));
    }
    let mut series = MultivariateSeries::new(channels, values)?;
    series.timestamps = Some(stamps);
    Ok(series)
}

/// Write `series` with 17 significant digits so that reading it back is exact.
pub fn write_csv(path: &Path, series: &MultivariateSeries) -> Result<()> {
    series.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string()];
    header.extend(series.names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(series.channels() + 1);
        rec.push(match &series.timestamps {
            Some(ts) => ts[t].clone(),
            None => t.to_string(),
        });
        for ch in &series.values {
            rec.push(format!("{:.16e}", ch[t]));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| CoraError::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "date,a,b\n2020-01-01 00:00:00,1.5,-2\n2020-01-01 01:00:00,0,3e2\n2020-01-01 02:00:00,7,8\n").unwrap();
        let s = load_csv(&p, &CsvSchema::default()).unwrap();
        assert_eq!(s.names, vec!["a", "b"]);
        assert_eq!(s.values, vec![vec![1.5, 0.0, 7.0], vec![-2.0, 300.0, 8.0]]);
        assert_eq!(s.timestamps.as_ref().unwrap()[1], "2020-01-01 01:00:00");
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let mut text = "date,a,b\n".to_string();
        for i in 0..6 {
            let b = if i == 4 { "oops".to_string() } else { i.to_string() };
            text.push_str(&format!("{i},{i},{b}\n"));
        }
        std::fs::write(&p, text).unwrap();
        match load_csv(&p, &CsvSchema::default()) {
            Err(CoraError::Cell { row, column, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_short_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "date,a\n0,1\n1,2\n").unwrap();
        let schema = CsvSchema {
            channels: Some(vec!["z".into()]),
            ..CsvSchema::default()
        };
        assert!(matches!(load_csv(&p, &schema), Err(CoraError::Data(_))));
        let schema = CsvSchema {
            min_rows: 3,
            ..CsvSchema::default()
        };
        assert!(matches!(load_csv(&p, &schema), Err(CoraError::Data(_))));
        let schema = CsvSchema {
            date_column: "time".into(),
            ..CsvSchema::default()
        };
        assert!(load_csv(&p, &schema).is_err());
    }

    #[test]
    fn nan_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "date,a\n0,1\n1,NaN\n").unwrap();
        assert!(matches!(load_csv(&p, &CsvSchema::default()), Err(CoraError::Cell { row: 2, .. })));
    }
}
