use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::MultiSeries;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

/// Column naming used to recognise the optional timestamp and label columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub timestamp_column: String,
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp_column: "timestamp".into(),
            label_column: "label".into(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultiSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        Error::Invalid(message) => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Reads the CSV layout: optional leading timestamp column, numeric
/// channels, optional trailing label column.
///
/// Empty numeric cells flag the step and carry the previous valid value
/// forward (leading gaps take the first valid value).
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<MultiSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let has_ts = header
        .first()
        .is_some_and(|h| h.eq_ignore_ascii_case(&schema.timestamp_column));
    let has_label = header.len() > usize::from(has_ts)
        && header
            .last()
            .is_some_and(|h| h.eq_ignore_ascii_case(&schema.label_column));
    let ch_start = usize::from(has_ts);
    let ch_end = header.len() - usize::from(has_label);
    if ch_end < ch_start + 2 {
        return Err(Error::invalid(format!(
            "need at least 2 numeric channels, header has {}",
            ch_end.saturating_sub(ch_start)
        )));
    }
    let dim = ch_end - ch_start;
    let names = header[ch_start..ch_end].to_vec();

    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut timestamps = Vec::new();
    let mut bad_rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Line numbers are 1-based and count the header.
        let line = i + 2;
        let rec = match rec {
            Ok(r) if r.len() == header.len() => r,
            _ => {
                bad_rows.push(line);
                continue;
            }
        };
        let mut missing = false;
        let mut row_ok = true;
        for c in ch_start..ch_end {
            let cell = &rec[c];
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                missing = true;
                cells.push(None);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => cells.push(Some(v)),
                    _ => {
                        row_ok = false;
                        cells.push(None);
                    }
                }
            }
        }
        let label = if has_label {
            match &rec[header.len() - 1] {
                "" | "0" => false,
                "1" => true,
                _ => {
                    row_ok = false;
                    false
                }
            }
        } else {
            false
        };
        if !row_ok {
            bad_rows.push(line);
        }
        labels.push(label || missing);
        if has_ts {
            timestamps.push(rec[0].to_owned());
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::BadRows { rows: bad_rows });
    }
    let steps = labels.len();
    if steps == 0 {
        return Err(Error::invalid("no data rows"));
    }
    let mut data = vec![0.0; steps * dim];
    for c in 0..dim {
        let first_valid = (0..steps).find_map(|t| cells[t * dim + c]).ok_or_else(|| {
            Error::invalid(format!("channel '{}' has no values", names[c]))
        })?;
        let mut last = first_valid;
        for t in 0..steps {
            if let Some(v) = cells[t * dim + c] {
                last = v;
            }
            data[t * dim + c] = last;
        }
    }
    MultiSeries::with_names(
        Matrix::from_vec(steps, dim, data)?,
        labels,
        names,
        has_ts.then_some(timestamps),
    )
}

pub fn write_csv(path: impl AsRef<Path>, series: &MultiSeries) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_csv_to(&mut buf, series)?;
    crate::pipeline::write_atomic(path, &buf)
}

/// Writes the same layout [`read_csv`] accepts. The label column is always
/// written; floats use the shortest round-tripping representation.
pub fn write_csv_to<W: Write>(writer: W, series: &MultiSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::new();
    if series.timestamps().is_some() {
        header.push("timestamp".to_owned());
    }
    header.extend(series.channel_names().iter().cloned());
    header.push("label".to_owned());
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(ts) = series.timestamps() {
            rec.push(ts[t].clone());
        }
        rec.extend(series.row(t).iter().map(|v| v.to_string()));
        rec.push(if series.labels()[t] { "1" } else { "0" }.to_owned());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<MultiSeries> {
        read_csv(s.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn no_label_column_means_all_clean() {
        let s = read("timestamp,a,b\n2020-01-01T00:00,1,2\n2020-01-01T01:00,3,4\n2020-01-01T02:00,5,6\n")
            .unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.labels(), &[false, false, false]);
        assert_eq!(s.timestamps().unwrap()[2], "2020-01-01T02:00");
    }

    #[test]
    fn empty_cell_is_flagged_and_carried_forward() {
        let s = read("timestamp,a,b\nt0,1,2\nt1,,4\nt2,5,6\n").unwrap();
        assert_eq!(s.labels(), &[false, true, false]);
        assert_eq!(s.row(1), &[1.0, 4.0]);
    }

    #[test]
    fn unparseable_rows_are_listed() {
        let err = read("a,b\n1,2\nx,3\n4,5\n6,?\n").unwrap_err();
        match err {
            Error::BadRows { rows } => assert_eq!(rows, vec![3, 5]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn single_channel_rejected() {
        assert!(read("timestamp,a,label\nt,1,0\n").is_err());
    }

    #[test]
    fn label_column_read() {
        let s = read("a,b,label\n1,2,0\n3,4,1\n").unwrap();
        assert_eq!(s.labels(), &[false, true]);
        assert!(s.timestamps().is_none());
    }

    #[test]
    fn round_trip_preserves_values() {
        let vals = vec![0.1, 1.0 / 3.0, -2.5e-7, 12345.678901234, std::f64::consts::PI, -0.0];
        let series = MultiSeries::new(Matrix::from_vec(3, 2, vals).unwrap(), vec![false, true, false]).unwrap();
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &series).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        for (a, b) in series.values().data().iter().zip(back.values().data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        assert_eq!(back.labels(), series.labels());
        let mut again = Vec::new();
        write_csv_to(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }
}
