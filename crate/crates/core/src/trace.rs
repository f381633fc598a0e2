//! Per-iteration run logs and their CSV form.
//!
//! The CSV schema is a stable external interface:
//! `iteration,time_s,rollouts_total,rel_error,grad_norm,max_delay`.
//! Floats are written in shortest round-trip form, so files are byte-stable
//! under a fixed seed and parse back losslessly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One row of a run log, appended after every master update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// Seconds since the start of the run: simulated clock in simulated mode,
    /// wall clock in threaded mode.
    pub time_s: f64,
    /// Rollouts consumed by accepted updates: `2 * N * iteration`.
    pub rollouts_total: u64,
    /// `(f(K_j) - f(K*)) / (f(K_0) - f(K*))`, from the exact oracle.
    pub rel_error: f64,
    /// Frobenius norm of the exact gradient at `K_j`.
    pub grad_norm: f64,
    /// Largest estimate delay observed so far in the run.
    pub max_delay: u64,
}

/// A policy update that left the stabilizing set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub iteration: u64,
    pub time_s: f64,
}

/// Full run log: per-update rows plus run-level bookkeeping that has no
/// place in the row schema.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Number of workers that produced the run.
    pub workers: usize,
    /// Sample pairs redrawn after a divergent rollout. Each redraw wasted two
    /// rollouts that are *not* part of `rollouts_total`.
    pub redraws: u64,
    /// Estimates dropped by the optional staleness filter (zero unless the
    /// filter is enabled).
    pub discarded_stale: u64,
    /// Shortest observed worker cycle duration (drawn in simulated mode,
    /// measured in threaded mode).
    pub observed_t_lo: f64,
    /// Longest observed worker cycle duration.
    pub observed_t_hi: f64,
    /// Set when a policy update destabilized the closed loop.
    pub failure: Option<FailureEvent>,
}

impl Trace {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            observed_t_lo: f64::INFINITY,
            observed_t_hi: 0.0,
            ..Self::default()
        }
    }

    /// First row at or below the relative-error target.
    pub fn first_at_target(&self, target: f64) -> Option<&TraceRow> {
        self.rows.iter().find(|row| row.rel_error <= target)
    }

    /// Largest delay recorded over the whole run.
    pub fn max_delay_seen(&self) -> u64 {
        self.rows.last().map_or(0, |row| row.max_delay)
    }

    pub fn final_rel_error(&self) -> Option<f64> {
        self.rows.last().map(|row| row.rel_error)
    }

    /// Serialize all rows as CSV with the fixed header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf)
            .map_err(|e| Error::InvalidArgument(format!("non-utf8 csv output: {e}")))
    }

    /// Parse rows back from CSV; run-level metadata is not stored in the CSV
    /// and comes back defaulted.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for row in rdr.deserialize() {
            rows.push(row?);
        }
        Ok(Self {
            rows,
            ..Self::default()
        })
    }

    pub fn read_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }
}
