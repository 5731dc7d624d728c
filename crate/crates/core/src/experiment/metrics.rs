//! Per-epoch metrics and their CSV encoding.
//!
//! File layout (schema v1):
//!
//! ```text
//! # sparsetrain-metrics v1
//! epoch,lr,keep_ratio,train_acc,train_loss,test_acc,test_acc_dense,mean_nz_rate,site_nz_rates,reset
//! 0,0.1,1,0.312400,1.902113,0.354100,,0.412345,0.5;0.4;...,0
//! ...
//! # best_test_acc=0.612300 best_epoch=13 final_test_acc=0.601200
//! ```
//!
//! `lr` and `keep_ratio` are printed as shortest round-trip decimals so
//! they parse back to the exact doubles used. Fractions carry six decimals.
//! `test_acc_dense` is empty unless dense evaluation was requested.
//! `reset` is 1 when the controller reset after this epoch, i.e. the next
//! row trains at `keep_ratio = 1`. Wall-clock time is logged, not stored,
//! so identical runs give byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_LINE: &str = "# sparsetrain-metrics v1";
pub const HEADER: [&str; 10] = [
    "epoch",
    "lr",
    "keep_ratio",
    "train_acc",
    "train_loss",
    "test_acc",
    "test_acc_dense",
    "mean_nz_rate",
    "site_nz_rates",
    "reset",
];

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub keep_ratio: f64,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_accuracy_dense: Option<f64>,
    pub mean_nonzero_rate: f64,
    pub site_nonzero_rates: Vec<f64>,
    pub reset: bool,
    pub seconds: f64,
}

impl EpochRecord {
    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            format!("{}", self.lr),
            format!("{}", self.keep_ratio),
            format!("{:.6}", self.train_accuracy),
            format!("{:.6}", self.train_loss),
            format!("{:.6}", self.test_accuracy),
            self.test_accuracy_dense.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", self.mean_nonzero_rate),
            self.site_nonzero_rates.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
            u8::from(self.reset).to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub best_test_accuracy: f64,
    pub best_epoch: usize,
    pub final_test_accuracy: f64,
}

impl RunSummary {
    fn line(&self) -> String {
        format!(
            "# best_test_acc={:.6} best_epoch={} final_test_acc={:.6}",
            self.best_test_accuracy, self.best_epoch, self.final_test_accuracy
        )
    }
}

/// Streams records to disk, flushing after every row.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{SCHEMA_LINE}")?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(HEADER).map_err(csv_err)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        self.inner.write_record(record.fields()).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(self, summary: &RunSummary) -> Result<()> {
        let mut file = self.inner.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        writeln!(file, "{}", summary.line())?;
        file.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("{other:?}")),
    }
}

/// A metrics file read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub records: Vec<EpochRecord>,
    pub summary: Option<RunSummary>,
}

fn parse_field<F: std::str::FromStr>(value: &str, column: &str) -> Result<F> {
    value.parse().map_err(|_| Error::Input(format!("cannot parse {column} value {value:?}")))
}

fn parse_summary(line: &str) -> Option<RunSummary> {
    let mut best = None;
    let mut epoch = None;
    let mut last = None;
    for part in line.trim_start_matches('#').split_whitespace() {
        let (k, v) = part.split_once('=')?;
        match k {
            "best_test_acc" => best = v.parse().ok(),
            "best_epoch" => epoch = v.parse().ok(),
            "final_test_acc" => last = v.parse().ok(),
            _ => {}
        }
    }
    Some(RunSummary { best_test_accuracy: best?, best_epoch: epoch?, final_test_accuracy: last? })
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SCHEMA_LINE) {
            return Err(Error::Input("missing metrics schema line".into()));
        }
        let summary = text.lines().rev().find(|l| l.starts_with("# best_test_acc")).and_then(parse_summary);
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::Input(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(csv_err)?;
            let f = |i: usize| row.get(i).unwrap_or("");
            records.push(EpochRecord {
                epoch: parse_field(f(0), HEADER[0])?,
                lr: parse_field(f(1), HEADER[1])?,
                keep_ratio: parse_field(f(2), HEADER[2])?,
                train_accuracy: parse_field(f(3), HEADER[3])?,
                train_loss: parse_field(f(4), HEADER[4])?,
                test_accuracy: parse_field(f(5), HEADER[5])?,
                test_accuracy_dense: if f(6).is_empty() { None } else { Some(parse_field(f(6), HEADER[6])?) },
                mean_nonzero_rate: parse_field(f(7), HEADER[7])?,
                site_nonzero_rates: f(8).split(';').filter(|s| !s.is_empty()).map(|s| parse_field(s, HEADER[8])).collect::<Result<_>>()?,
                reset: parse_field::<u8>(f(9), HEADER[9])? == 1,
                seconds: 0.0,
            });
        }
        Ok(MetricsTable { records, summary })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
