//! Metrics CSV rows.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::StageReport;
use crate::error::Result;

pub const HEADER: [&str; 8] = [
    "run_id",
    "phase",
    "step",
    "loss",
    "tokens_seen",
    "wall_ms",
    "tokens_per_sec",
    "mfu_percent",
];

/// One CSV row. `tokens_seen` and `wall_ms` are cumulative within a run
/// phase; `tokens_per_sec` is the rate of the step the row closes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: String,
    pub step: usize,
    pub loss: Option<f64>,
    pub tokens_seen: usize,
    pub wall_ms: f64,
    pub tokens_per_sec: f64,
    pub mfu_percent: Option<f64>,
}

impl MetricsRow {
    /// One row per training step of `report`.
    pub fn from_report(run_id: &str, report: &StageReport) -> Vec<MetricsRow> {
        let per_step = report
            .tokens_seen
            .checked_div(report.steps_run)
            .unwrap_or(0);
        let (mut tokens, mut wall) = (0, 0.0);
        report
            .trace
            .iter()
            .zip(&report.step_wall_ms)
            .enumerate()
            .map(|(i, (&loss, &ms))| {
                tokens += per_step;
                wall += ms;
                MetricsRow {
                    run_id: run_id.to_string(),
                    phase: report.phase.to_string(),
                    step: i + 1,
                    loss: Some(loss),
                    tokens_seen: tokens,
                    wall_ms: wall,
                    tokens_per_sec: rate(per_step, ms),
                    mfu_percent: None,
                }
            })
            .collect()
    }
}

pub(crate) fn rate(tokens: usize, ms: f64) -> f64 {
    if ms > 0.0 {
        tokens as f64 / (ms / 1e3)
    } else {
        0.0
    }
}

/// CSV writer that always emits the header, even for an empty file.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        inner.write_record(HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn write_all<'a>(&mut self, rows: impl IntoIterator<Item = &'a MetricsRow>) -> Result<()> {
        for r in rows {
            self.write(r)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error().into())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
