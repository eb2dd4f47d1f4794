//! Persistent experiment reports: JSON round trip, CSV export, and the
//! determinism contract (everything outside the timing section is a pure
//! function of the config).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ExperimentConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report (de)serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema version mismatch: file has {found}, this build expects {expected}")]
    SchemaVersion { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialRow {
    pub trial_id: u64,
    pub bit_accuracy: f64,
    pub detected: bool,
    /// Max relative trajectory perturbation over projected generation steps.
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub mean_bit_accuracy: f64,
    pub detection_rate: f64,
    /// What `detection_rate` measures for this mode: "TPR", "ASR", or "FPR".
    pub rate_label: String,
    /// 95% Wilson score interval for the detection rate.
    pub rate_ci_low: f64,
    pub rate_ci_high: f64,
}

impl Aggregate {
    pub fn from_rows(rows: &[TrialRow], rate_label: &str) -> Self {
        let n = rows.len();
        let mean_bit_accuracy = if n == 0 {
            0.0
        } else {
            rows.iter().map(|r| r.bit_accuracy).sum::<f64>() / n as f64
        };
        let detections = rows.iter().filter(|r| r.detected).count();
        let detection_rate = if n == 0 { 0.0 } else { detections as f64 / n as f64 };
        let (rate_ci_low, rate_ci_high) = wilson_interval(detections, n);
        Self {
            mean_bit_accuracy,
            detection_rate,
            rate_label: rate_label.to_string(),
            rate_ci_low,
            rate_ci_high,
        }
    }
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * ((p * (1.0 - p) + z2 / (4.0 * nf)) / nf).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Wall-clock data, kept apart from the deterministic payload.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimingSection {
    pub wall_time_s: Vec<f64>,
    pub total_wall_time_s: f64,
    /// Median projected time over median unprojected time, for timing mode.
    pub time_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: u32,
    pub seed_base: u64,
    pub config_echo: ExperimentConfig,
    pub per_trial: Vec<TrialRow>,
    pub aggregate: Aggregate,
    pub timing: TimingSection,
}

impl ExperimentReport {
    /// JSON of everything except the timing section; two runs of the same
    /// config must agree on these bytes exactly.
    pub fn deterministic_json(&self) -> Result<String, ReportError> {
        let mut clone = self.clone();
        clone.timing = TimingSection::default();
        Ok(serde_json::to_string_pretty(&clone)?)
    }

    /// Per-trial rows as CSV. Columns, in order:
    /// `trial_id,bit_accuracy,detected,deviation,wall_time_s`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trial_id,bit_accuracy,detected,deviation,wall_time_s\n");
        for (i, row) in self.per_trial.iter().enumerate() {
            let wt = self.timing.wall_time_s.get(i).copied().unwrap_or(f64::NAN);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.trial_id, row.bit_accuracy, row.detected, row.deviation, wt
            ));
        }
        out
    }
}

pub fn save_report(path: &Path, report: &ExperimentReport) -> Result<(), ReportError> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExperimentReport, ReportError> {
    let bytes = std::fs::read(path)?;
    // Check the version before committing to full deserialization so a
    // schema mismatch yields a precise error.
    #[derive(Deserialize)]
    struct VersionProbe {
        version: u32,
    }
    let probe: VersionProbe = serde_json::from_slice(&bytes)?;
    if probe.version != REPORT_SCHEMA_VERSION {
        return Err(ReportError::SchemaVersion {
            found: probe.version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_report() -> ExperimentReport {
        let rows = vec![
            TrialRow {
                trial_id: 0,
                bit_accuracy: 1.0,
                detected: true,
                deviation: 0.01,
            },
            TrialRow {
                trial_id: 1,
                bit_accuracy: 0.9,
                detected: false,
                deviation: 0.02,
            },
        ];
        let aggregate = Aggregate::from_rows(&rows, "TPR");
        ExperimentReport {
            version: REPORT_SCHEMA_VERSION,
            seed_base: 7,
            config_echo: ExperimentConfig::default(),
            per_trial: rows,
            aggregate,
            timing: TimingSection {
                wall_time_s: vec![0.5, 0.6],
                total_wall_time_s: 1.1,
                time_ratio: None,
            },
        }
    }

    #[test]
    fn json_round_trip_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.json");
        let report = sample_report();
        save_report(&path, &report).unwrap();
        let loaded = load_report(&path).unwrap();
        assert_eq!(loaded.per_trial, report.per_trial);
        assert_eq!(loaded.aggregate, report.aggregate);
        assert_eq!(loaded.seed_base, 7);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut report = sample_report();
        report.version = 999;
        save_report(&path, &report).unwrap();
        match load_report(&path) {
            Err(ReportError::SchemaVersion { found: 999, .. }) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn aggregates_recomputable_from_rows() {
        let report = sample_report();
        let recomputed = Aggregate::from_rows(&report.per_trial, "TPR");
        assert_eq!(recomputed, report.aggregate);
        assert_eq!(report.aggregate.mean_bit_accuracy, 0.95);
        assert_eq!(report.aggregate.detection_rate, 0.5);
    }

    #[test]
    fn csv_row_count_matches_trials() {
        let report = sample_report();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + report.per_trial.len());
        assert!(csv.starts_with("trial_id,"));
    }

    #[test]
    fn deterministic_json_excludes_timing() {
        let mut a = sample_report();
        let mut b = sample_report();
        a.timing.wall_time_s = vec![1.0, 2.0];
        b.timing.wall_time_s = vec![9.0, 8.0];
        assert_eq!(a.deterministic_json().unwrap(), b.deterministic_json().unwrap());
    }

    #[test]
    fn wilson_interval_sane() {
        let (lo, hi) = wilson_interval(50, 100);
        assert!(lo > 0.39 && lo < 0.5);
        assert!(hi > 0.5 && hi < 0.61);
        let (lo, hi) = wilson_interval(0, 32);
        assert_eq!(lo, 0.0);
        assert!(hi < 0.15);
        let (lo, hi) = wilson_interval(32, 32);
        assert!(lo > 0.85);
        assert_eq!(hi, 1.0);
    }
}
