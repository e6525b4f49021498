//! Experiment result rows and their CSV form.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::transfer::{Family, Mode, Regime};

pub const RESULT_HEADER: [&str; 10] = [
    "family",
    "mode",
    "regime",
    "n_s",
    "replication",
    "seed",
    "metric",
    "value",
    "wall_time_s",
    "status",
];

pub const STATUS_OK: &str = "ok";

/// One completed (or failed) pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub family: Family,
    pub mode: Mode,
    pub regime: Regime,
    /// Source sample size; 0 for non-transfer runs.
    pub n_s: usize,
    pub replication: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
    pub wall_time_s: f64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    fn fields(&self) -> [String; 10] {
        [
            self.family.name().to_string(),
            self.mode.name().to_string(),
            self.regime.name().to_string(),
            self.n_s.to_string(),
            self.replication.to_string(),
            self.seed.to_string(),
            self.metric.clone(),
            self.value.to_string(),
            self.wall_time_s.to_string(),
            self.status.clone(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        if rec.len() != RESULT_HEADER.len() {
            return Err(Error::Parse(format!("line {line}: expected 10 fields, got {}", rec.len())));
        }
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: bad {} {:?}", RESULT_HEADER[k], &rec[k])))
        };
        let int = |k: usize| -> Result<u64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: bad {} {:?}", RESULT_HEADER[k], &rec[k])))
        };
        Ok(Self {
            family: Family::parse(&rec[0])?,
            mode: Mode::parse(&rec[1])?,
            regime: Regime::parse(&rec[2])?,
            n_s: int(3)? as usize,
            replication: int(4)? as usize,
            seed: int(5)?,
            metric: rec[6].to_string(),
            value: num(7)?,
            wall_time_s: num(8)?,
            status: rec[9].to_string(),
        })
    }
}

/// All rows of one sweep, in plan order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

/// Streams rows to a CSV sink, flushing after every row.
pub struct ResultWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ResultWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(RESULT_HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<()> {
        self.inner.write_record(row.fields()).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

pub fn write_results<W: Write>(result: &ExperimentResult, sink: W) -> Result<()> {
    let mut w = ResultWriter::new(sink)?;
    for row in &result.rows {
        w.write(row)?;
    }
    Ok(())
}

pub fn read_results<R: Read>(source: R) -> Result<ExperimentResult> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected results header {:?}", header)));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        rows.push(ResultRow::from_record(&rec.map_err(csv_err)?, k + 2)?);
    }
    Ok(ExperimentResult { rows })
}

impl ExperimentResult {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_results(self, std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        read_results(std::fs::File::open(path)?)
    }

    /// `(family, mode)` pairs in order of first appearance.
    pub fn panels(&self) -> Vec<(Family, Mode)> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&(r.family, r.mode)) {
                out.push((r.family, r.mode));
            }
        }
        out
    }

    /// Successful values for one panel, regime and source size.
    pub fn values(&self, family: Family, mode: Mode, regime: Regime, n_s: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.is_ok() && r.family == family && r.mode == mode && r.regime == regime)
            .filter(|r| n_s.is_none_or(|n| r.n_s == n))
            .map(|r| r.value)
            .collect()
    }

    /// Sorted distinct source sizes of successful transfer rows.
    pub fn source_sizes(&self, family: Family, mode: Mode) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.is_ok() && r.family == family && r.mode == mode && r.regime == Regime::Transfer)
            .map(|r| r.n_s)
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(regime: Regime, n_s: usize, value: f64) -> ResultRow {
        ResultRow {
            family: Family::Flow,
            mode: Mode::Unconditional,
            regime,
            n_s,
            replication: 1,
            seed: 42,
            metric: "wasserstein".into(),
            value,
            wall_time_s: 0.125,
            status: STATUS_OK.into(),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut failed = row(Regime::Transfer, 4914, f64::NAN);
        failed.status = "failed: loss is NaN, epoch 3".into();
        let res = ExperimentResult {
            rows: vec![row(Regime::Transfer, 2980, 0.1 + 0.2), row(Regime::NonTransfer, 0, 1.0 / 3.0), failed],
        };
        let mut buf = Vec::new();
        write_results(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("family,mode,regime,n_s,replication,seed,metric,value,wall_time_s,status\n"));
        let back = read_results(buf.as_slice()).unwrap();
        assert_eq!(back.rows[..2], res.rows[..2]);
        assert!(back.rows[2].value.is_nan());
        assert_eq!(back.rows[2].status, res.rows[2].status);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(read_results("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn grouping() {
        let res = ExperimentResult {
            rows: vec![row(Regime::Transfer, 10, 1.0), row(Regime::Transfer, 10, 3.0), row(Regime::NonTransfer, 0, 5.0)],
        };
        assert_eq!(mean(&res.values(Family::Flow, Mode::Unconditional, Regime::Transfer, Some(10))), Some(2.0));
        assert_eq!(res.source_sizes(Family::Flow, Mode::Unconditional), vec![10]);
        assert_eq!(res.panels(), vec![(Family::Flow, Mode::Unconditional)]);
    }
}
