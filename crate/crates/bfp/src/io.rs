//! CSV and JSON serialization of draws and reports.
//!
//! Draw CSVs carry one header row naming each packed coordinate plus
//! `subset_index` and `seed` columns; combined draws append a `provenance`
//! column. Floats are written with shortest-roundtrip formatting so files
//! reload bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::combine::{CombinedDraws, Provenance};
use crate::error::{Error, Result};
use crate::metrics::AccuracyReport;
use crate::sampler::{column_names, packed_dim, DrawSet, SamplerConfig};

pub fn write_drawset<W: Write>(ds: &DrawSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subset_index".to_string(), "seed".to_string()];
    header.extend(ds.names());
    w.write_record(&header)?;
    for row in &ds.draws {
        let mut rec = vec![ds.subset_index.to_string(), ds.seed.to_string()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_drawset_path(ds: &DrawSet, path: &Path) -> Result<()> {
    write_drawset(ds, std::fs::File::create(path)?)
}

/// Reads a drawset CSV produced by [`write_drawset`]. The sampler config
/// echo is not stored in the file, so the returned drawset carries the
/// supplied one.
pub fn read_drawset<R: Read>(reader: R, config: SamplerConfig) -> Result<DrawSet> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let s = header.iter().filter(|h| h.starts_with("mu")).count();
    if s == 0 || header.len() != 2 + packed_dim(s) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unrecognized drawset header with {} columns", header.len()),
        });
    }
    let expected = {
        let mut h = vec!["subset_index".to_string(), "seed".to_string()];
        h.extend(column_names(s));
        h
    };
    for (got, want) in header.iter().zip(&expected) {
        if got != want {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column '{want}', found '{got}'"),
            });
        }
    }

    let mut subset_index = 0usize;
    let mut seed = 0u64;
    let mut draws = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let parse_f = |field: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("'{field}' is not a number"),
            })
        };
        subset_index = record[0].parse().map_err(|_| Error::Parse {
            line,
            msg: "bad subset_index".into(),
        })?;
        seed = record[1].parse().map_err(|_| Error::Parse { line, msg: "bad seed".into() })?;
        let row: Vec<f64> = record.iter().skip(2).map(parse_f).collect::<Result<_>>()?;
        draws.push(row);
    }
    Ok(DrawSet::new(s, draws, subset_index, seed, config))
}

pub fn read_drawset_path(path: &Path, config: SamplerConfig) -> Result<DrawSet> {
    read_drawset(std::fs::File::open(path)?, config)
}

pub fn write_combined<W: Write>(cd: &CombinedDraws, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subset_index".to_string(), "seed".to_string()];
    header.extend(column_names(cd.state_count()));
    header.push("provenance".to_string());
    w.write_record(&header)?;
    for (row, prov) in cd.draws.iter().zip(&cd.provenance) {
        let subset = match prov {
            Provenance::Subset { subset, .. } => subset.to_string(),
            Provenance::Rank(_) => String::new(),
        };
        let mut rec = vec![subset, String::new()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        rec.push(prov.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_combined_path(cd: &CombinedDraws, path: &Path) -> Result<()> {
    write_combined(cd, std::fs::File::create(path)?)
}

/// Accuracy report as `dimension,value` rows followed by a median row.
pub fn write_accuracy<W: Write>(report: &AccuracyReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["dimension", "accuracy"])?;
    for (name, value) in report.dimension_names.iter().zip(&report.per_dimension) {
        w.write_record([name.as_str(), &format!("{value}")])?;
    }
    w.write_record(["median", &format!("{}", report.median)])?;
    w.flush()?;
    Ok(())
}

pub fn accuracy_to_json(report: &AccuracyReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Reads a numeric draw matrix (any method's output) back as rows plus the
/// packed coordinate names, ignoring bookkeeping columns.
pub fn read_draw_matrix<R: Read>(reader: R) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let keep: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "subset_index" && *h != "seed" && *h != "provenance")
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if keep.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no value columns".into() });
    }
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let row: Vec<f64> = keep
            .iter()
            .map(|(idx, name)| {
                record[*idx].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column '{name}': '{}' is not a number", &record[*idx]),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((rows, keep.into_iter().map(|(_, n)| n).collect()))
}

pub fn read_draw_matrix_path(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    read_draw_matrix(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combine::{combination_method, CenterInputs};

    fn sample_drawset() -> DrawSet {
        let config = SamplerConfig { iters: 4, burn_in: 2, thin: 1, ..SamplerConfig::default() };
        DrawSet::new(
            2,
            vec![
                vec![-1.5, 1.0, 0.3, 0.2, 0.8, 0.2, 0.7, 0.3, 0.55, 0.45],
                vec![-1.25, 1.5, 0.25, 0.3, 0.75, 0.25, 0.6, 0.4, 0.5, 0.5],
            ],
            3,
            42,
            config,
        )
    }

    #[test]
    fn drawset_roundtrip_is_bit_exact() {
        let ds = sample_drawset();
        let mut buf = Vec::new();
        write_drawset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("subset_index,seed,mu1,mu2,sigma2_1,sigma2_2,Q_1_1"));
        let back = read_drawset(&buf[..], ds.config.clone()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn combined_csv_carries_provenance() {
        let ds = sample_drawset();
        let more = {
            let mut d = ds.clone();
            d.subset_index = 4;
            d
        };
        let combined = combination_method("dpmc")
            .unwrap()
            .combine(&[ds, more], &CenterInputs::default())
            .unwrap();
        let mut buf = Vec::new();
        write_combined(&combined, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().ends_with("provenance"));
        assert!(lines.next().unwrap().ends_with("3:0"));

        let (rows, names) = read_draw_matrix(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(names.len(), 10);
    }

    #[test]
    fn accuracy_csv_has_median_row() {
        let report = AccuracyReport::new(
            vec!["mu1".into(), "mu2".into(), "mu3".into()],
            vec![0.9, 0.8, 0.95],
        );
        let mut buf = Vec::new();
        write_accuracy(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("mu1,0.9"));
        assert!(text.lines().last().unwrap().starts_with("median,0.9"));
        let json = accuracy_to_json(&report).unwrap();
        assert!(json.contains("\"median\": 0.9"));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let ds = sample_drawset();
        let mut buf = Vec::new();
        write_drawset(&ds, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text = text.replace("-1.25", "oops");
        match read_drawset(text.as_bytes(), ds.config.clone()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
