//! Per-trial, per-block trace rows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autolr::RunReport;
use crate::{Error, Result};

pub const TRACE_HEADER: &str = "epoch,trial,block,v,v_bar,lr,quality,accepted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// 1-based AutoLR trial; 0 for baseline schedules.
    pub trial: usize,
    /// 1-based block index.
    pub block: usize,
    pub v: f64,
    pub v_bar: Option<f64>,
    pub lr: f64,
    pub quality: f64,
    pub accepted: bool,
}

impl TraceRow {
    fn to_line(&self) -> String {
        let v_bar = self.v_bar.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.trial, self.block, self.v, v_bar, self.lr, self.quality, self.accepted
        )
    }
}

/// Flattens a controller run into trace rows.
pub fn autolr_rows(report: &RunReport) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for trial in report.trials() {
        for (k, &v) in trial.variations.iter().enumerate() {
            rows.push(TraceRow {
                epoch: trial.epoch,
                trial: trial.trial,
                block: k + 1,
                v,
                v_bar: trial.targets.as_ref().map(|t| t[k]),
                lr: trial.lrs.0[k],
                quality: trial.quality,
                accepted: trial.accepted,
            });
        }
    }
    rows
}

pub fn render_trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_trace_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(err(1, format!("header must be `{TRACE_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(err(n, format!("expected 8 cells, found {}", cells.len())));
        }
        fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        let bad = |col: &str| err(n, format!("bad value in column `{col}`"));
        rows.push(TraceRow {
            epoch: num(cells[0]).ok_or_else(|| bad("epoch"))?,
            trial: num(cells[1]).ok_or_else(|| bad("trial"))?,
            block: num(cells[2]).ok_or_else(|| bad("block"))?,
            v: num(cells[3]).ok_or_else(|| bad("v"))?,
            v_bar: if cells[4].is_empty() {
                None
            } else {
                Some(num(cells[4]).ok_or_else(|| bad("v_bar"))?)
            },
            lr: num(cells[5]).ok_or_else(|| bad("lr"))?,
            quality: num(cells[6]).ok_or_else(|| bad("quality"))?,
            accepted: num(cells[7]).ok_or_else(|| bad("accepted"))?,
        });
    }
    Ok(rows)
}

/// Checks ordering by (epoch, trial, block) and that accepted rows beat `tau_s`.
pub fn validate_trace(rows: &[TraceRow], tau_s: f64) -> Result<()> {
    for (i, pair) in rows.windows(2).enumerate() {
        let a = (pair[0].epoch, pair[0].trial, pair[0].block);
        let b = (pair[1].epoch, pair[1].trial, pair[1].block);
        if a >= b {
            return Err(Error::InvalidInput(format!(
                "trace rows {} and {} out of order",
                i + 1,
                i + 2
            )));
        }
    }
    if let Some(r) = rows
        .iter()
        .find(|r| r.accepted && (r.quality.is_nan() || r.quality <= tau_s))
    {
        return Err(Error::InvalidInput(format!(
            "epoch {} trial {} accepted with quality {} <= {tau_s}",
            r.epoch, r.trial, r.quality
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, trial: usize, block: usize, accepted: bool) -> TraceRow {
        TraceRow {
            epoch,
            trial,
            block,
            v: 1.5e-5,
            v_bar: (trial > 1).then_some(2e-5),
            lr: 1e-3,
            quality: if accepted { 1.0 } else { 0.5 },
            accepted,
        }
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let rows = vec![
            row(1, 1, 1, false),
            row(1, 1, 2, false),
            row(1, 2, 1, true),
            row(1, 2, 2, true),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        write_trace_csv(&rows, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,trial,block,v,v_bar,lr,quality,accepted"
        );
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "1,1,1,0.000015,,0.001,0.5,false"
        );
        assert_eq!(read_trace_csv(&p).unwrap(), rows);
        validate_trace(&rows, 0.94).unwrap();
    }

    #[test]
    fn validation_catches_bad_rows() {
        let mut rows = vec![row(1, 2, 1, false), row(1, 1, 1, false)];
        assert!(validate_trace(&rows, 0.94).is_err());
        rows = vec![TraceRow {
            quality: 0.9,
            ..row(1, 1, 1, true)
        }];
        assert!(validate_trace(&rows, 0.94).is_err());
    }
}
