//! CSV output of sweep and convergence records.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Writer};

use super::{ConvergenceRecord, SweepRecord};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 13] = [
    "detector",
    "M",
    "K",
    "mod",
    "channel",
    "csir",
    "snr_db",
    "trials",
    "symbols_sent",
    "symbol_errors",
    "ser",
    "mean_iters",
    "wall_ms",
];

const CONVERGENCE_HEADER: [&str; 4] = ["detector", "snr_db", "iteration", "ser"];

/// 17 significant digits, enough to round-trip any `f64`.
fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv { path: path.to_path_buf(), source }
}

fn write_rows<W: Write>(w: W, path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = Writer::from_writer(w);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn sweep_row(r: &SweepRecord) -> Vec<String> {
    vec![
        r.detector.clone(),
        r.m.to_string(),
        r.k.to_string(),
        r.modulation.clone(),
        r.channel.clone(),
        r.csir.clone(),
        real(r.snr_db),
        r.trials.to_string(),
        r.symbols_sent.to_string(),
        r.symbol_errors.to_string(),
        real(r.ser),
        real(r.mean_iters),
        real(r.wall_ms),
    ]
}

fn convergence_row(r: &ConvergenceRecord) -> Vec<String> {
    vec![r.detector.clone(), real(r.snr_db), r.iteration.to_string(), real(r.ser)]
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<StringRecord>> {
    let mut r = ReaderBuilder::new().from_path(path).map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Config(format!("{}: unexpected CSV header", path.display())));
    }
    r.records().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

fn field<T: std::str::FromStr>(rec: &StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: bad value in column {} of a row", path.display(), i + 1)))
}

/// Header row then one row per record.
pub fn write_csv(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_rows(create(path)?, path, &CSV_HEADER, records.iter().map(sweep_row))
}

/// [`write_csv`] to an arbitrary sink such as stdout.
pub fn write_csv_to<W: Write>(records: &[SweepRecord], w: W) -> Result<()> {
    write_rows(w, Path::new("<stream>"), &CSV_HEADER, records.iter().map(sweep_row))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRecord>> {
    let path = path.as_ref();
    read_rows(path, &CSV_HEADER)?
        .iter()
        .map(|rec| {
            Ok(SweepRecord {
                detector: field(rec, 0, path)?,
                m: field(rec, 1, path)?,
                k: field(rec, 2, path)?,
                modulation: field(rec, 3, path)?,
                channel: field(rec, 4, path)?,
                csir: field(rec, 5, path)?,
                snr_db: field(rec, 6, path)?,
                trials: field(rec, 7, path)?,
                symbols_sent: field(rec, 8, path)?,
                symbol_errors: field(rec, 9, path)?,
                ser: field(rec, 10, path)?,
                mean_iters: field(rec, 11, path)?,
                wall_ms: field(rec, 12, path)?,
            })
        })
        .collect()
}

/// Columns `detector,snr_db,iteration,ser`.
pub fn write_convergence_csv(records: &[ConvergenceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_rows(create(path)?, path, &CONVERGENCE_HEADER, records.iter().map(convergence_row))
}

pub fn read_convergence_csv(path: impl AsRef<Path>) -> Result<Vec<ConvergenceRecord>> {
    let path = path.as_ref();
    read_rows(path, &CONVERGENCE_HEADER)?
        .iter()
        .map(|rec| {
            Ok(ConvergenceRecord {
                detector: field(rec, 0, path)?,
                snr_db: field(rec, 1, path)?,
                iteration: field(rec, 2, path)?,
                ser: field(rec, 3, path)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> SweepRecord {
        SweepRecord {
            detector: "lmmse-vb".into(),
            m: 32,
            k: 32,
            modulation: "qpsk".into(),
            channel: "exp_corr(0.5+0.5j)".into(),
            csir: "pilot:pp=1:tp=32".into(),
            snr_db: 12.0,
            trials: 3,
            symbols_sent: 96,
            symbol_errors: 7,
            ser: 7.0 / 96.0,
            mean_iters: 11.0 / 3.0,
            wall_ms: 0.123456789,
        }
    }

    #[test]
    fn empty_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
        assert!(read_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let recs = vec![record(), SweepRecord { snr_db: -3.25, ser: 1.0 / 3.0, ..record() }];
        write_csv(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.ends_with('\n'));
        assert!(text.contains("7.2916666666666671e-2"));
        assert_eq!(read_csv(&p).unwrap(), recs);
    }

    #[test]
    fn convergence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let recs = vec![ConvergenceRecord { detector: "amp".into(), snr_db: 12.0, iteration: 1, ser: 0.1 }];
        write_convergence_csv(&recs, &p).unwrap();
        assert_eq!(read_convergence_csv(&p).unwrap(), recs);
    }

    #[test]
    fn unwritable_path_reports_path() {
        let err = write_csv(&[record()], "/nonexistent-dir/x/r.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x/r.csv"));
    }
}
