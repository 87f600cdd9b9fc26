//! CSV and manifest writers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::experiment::{ExperimentConfig, SweepRow};
use crate::prune::{CurvePoint, Phase, RunRecord};

fn alive_field(counts: &[usize]) -> String {
    counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn num(v: f64) -> String {
    // Rust's shortest round-trip formatting keeps full double precision.
    format!("{v}")
}

pub fn write_run_csv(path: &Path, records: &[RunRecord], criterion: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "phase", "accuracy", "compression", "alive_counts", "criterion", "seed", "n_pruned", "mean_ce", "kl", "degenerate_layers"])?;
    for r in records {
        let phase = match r.phase {
            Phase::Train => "train",
            Phase::FineTune => "fine_tune",
        };
        w.write_record([
            r.epoch.to_string(),
            phase.to_string(),
            num(r.test_accuracy),
            num(r.compression),
            alive_field(&r.alive_counts),
            criterion.to_string(),
            seed.to_string(),
            r.prune_events.len().to_string(),
            num(r.mean_ce),
            num(r.kl),
            alive_field(&r.degenerate_layers),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the origin row (step 0) followed by the curve points.
pub fn write_curve_csv(path: &Path, origin_accuracy: f64, origin_alive: &[usize], points: &[CurvePoint], criterion: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "accuracy", "compression", "alive_counts", "criterion", "seed", "structures_removed", "stop"])?;
    w.write_record(["0".into(), num(origin_accuracy), num(0.0), alive_field(origin_alive), criterion.to_string(), seed.to_string(), "0".into(), "false".into()])?;
    for p in points {
        w.write_record([
            p.step.to_string(),
            num(p.accuracy),
            num(p.compression),
            alive_field(&p.alive_counts),
            criterion.to_string(),
            seed.to_string(),
            p.structures_removed.to_string(),
            p.stop.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with a header row and a label column; undefined entries are empty.
pub fn write_spearman_csv(path: &Path, labels: &[String], m: &[Vec<Option<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["criterion".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(m) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.map(num).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["p1", "seed", "compression", "accuracy"])?;
    for r in rows {
        w.write_record([r.p1.to_string(), r.seed.to_string(), num(r.compression), num(r.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub final_metrics: serde_json::Value,
    pub outputs: Vec<String>,
    pub crate_version: &'static str,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, final_metrics: serde_json::Value, outputs: &[PathBuf]) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            config_hash: config.config_hash(),
            final_metrics,
            outputs: outputs.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect(),
            crate_version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Tracks files written by a command so they can be removed if it fails.
#[derive(Debug, Default)]
pub struct OutputSet {
    created: Vec<PathBuf>,
}

impl OutputSet {
    pub fn path(&mut self, dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        self.created.push(p.clone());
        p
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.created
    }

    /// Deletes every tracked file that exists.
    pub fn remove_all(&self) {
        for p in &self.created {
            let _ = std::fs::remove_file(p);
        }
    }
}
