use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One row of the training log, written per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_e: f64,
    pub loss_r: f64,
    /// Mean E(x, y) over the epoch's energy-phase batches.
    pub energy_real: f64,
    /// Mean E(x, ŷ) over the epoch's energy-phase batches.
    pub energy_fake: f64,
    /// Mean of the scaled-MSE term α(E(x,y)² + E(x,ŷ)²).
    pub energy_l2: f64,
    /// Test-set Fréchet distance.
    pub fd: f64,
    /// Fraction of sampled test molecules passing all molecule invariants.
    pub valid_fraction: f64,
    pub wall_clock_secs: f64,
}

pub const METRIC_CSV_HEADER: &str =
    "epoch,loss_d,loss_g,loss_e,loss_r,energy_real,energy_fake,energy_l2,fd,valid_fraction,wall_clock_secs";

pub fn metric_csv_row(r: &MetricRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.loss_d,
        r.loss_g,
        r.loss_e,
        r.loss_r,
        r.energy_real,
        r.energy_fake,
        r.energy_l2,
        r.fd,
        r.valid_fraction,
        r.wall_clock_secs
    )
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{METRIC_CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", metric_csv_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, records: &[MetricRecord]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).expect("metric record serializes");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Number of consecutive Fréchet-distance increases that count as
/// divergence.
pub const FD_RISE_LIMIT: usize = 50;

/// True when training has diverged: a non-finite loss in the latest
/// record, a critic loss beyond 1e4 in magnitude, or a Fréchet distance
/// that has risen monotonically through the last `FD_RISE_LIMIT`
/// evaluations.
pub fn divergence_check(records: &[MetricRecord]) -> bool {
    let Some(last) = records.last() else {
        return false;
    };
    let losses = [last.loss_d, last.loss_g, last.loss_e, last.loss_r];
    if losses.iter().any(|l| !l.is_finite()) {
        return true;
    }
    if last.loss_d.abs() > 1e4 {
        return true;
    }
    if records.len() > FD_RISE_LIMIT {
        let tail = &records[records.len() - (FD_RISE_LIMIT + 1)..];
        let all_finite = tail.iter().all(|r| r.fd.is_finite());
        if all_finite && tail.windows(2).all(|w| w[1].fd > w[0].fd) {
            return true;
        }
    }
    false
}
