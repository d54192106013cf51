//! Per-episode rows and run-level aggregates.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use memnav_core::env::MetricSet;
use memnav_core::reflection::ReflectionOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_id: String,
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    /// Number of decisions the backend made.
    pub steps: usize,
    /// "success", "MRD", "FGR", "PGC"; absent when unclassifiable.
    pub verdict: Option<String>,
    pub first_wrong_step: Option<usize>,
    /// (viewpoint, outcome) pairs from the memory commit, continual runs only.
    pub insert_outcomes: Vec<(String, String)>,
    pub error: Option<String>,
}

impl EpisodeRow {
    pub fn new(episode_id: &str, metrics: MetricSet, steps: usize) -> Self {
        EpisodeRow {
            episode_id: episode_id.to_string(),
            ne: metrics.ne,
            success: metrics.success,
            oracle_success: metrics.oracle_success,
            spl: metrics.spl,
            steps,
            verdict: None,
            first_wrong_step: None,
            insert_outcomes: Vec::new(),
            error: None,
        }
    }

    pub fn set_verdict(&mut self, outcome: ReflectionOutcome) {
        match outcome {
            ReflectionOutcome::Success => {
                self.verdict = Some("success".to_string());
                self.first_wrong_step = None;
            }
            ReflectionOutcome::Failure {
                failure_type,
                first_wrong_step,
            } => {
                self.verdict = Some(failure_type.code().to_string());
                self.first_wrong_step = Some(first_wrong_step);
            }
        }
    }
}

/// Aggregates over all rows. SR and OSR appear both as full-precision
/// fractions and integer-rounded percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub ne_mean: f64,
    pub sr: f64,
    pub sr_pct: u32,
    pub osr: f64,
    pub osr_pct: u32,
    pub spl_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<EpisodeRow>,
    pub summary: Summary,
}

impl RunReport {
    pub fn from_rows(rows: Vec<EpisodeRow>) -> Self {
        let n = rows.len();
        let mean = |f: &dyn Fn(&EpisodeRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let rate = |f: &dyn Fn(&EpisodeRow) -> bool| {
            if n == 0 {
                0.0
            } else {
                rows.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let sr = rate(&|r| r.success);
        let osr = rate(&|r| r.oracle_success);
        let summary = Summary {
            episodes: n,
            ne_mean: mean(&|r| r.ne),
            sr,
            sr_pct: (sr * 100.0).round() as u32,
            osr,
            osr_pct: (osr * 100.0).round() as u32,
            spl_mean: mean(&|r| r.spl),
        };
        RunReport { rows, summary }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body + "\n")
            .with_context(|| format!("writing report to {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading report from {}", path.display()))?;
        Ok(serde_json::from_str(&raw)?)
    }

    /// Human-oriented rendering used for stdout.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "episode {}: NE {:.3} m | success {} | oracle {} | SPL {:.3} | steps {}{}{}\n",
                row.episode_id,
                row.ne,
                if row.success { "yes" } else { "no" },
                if row.oracle_success { "yes" } else { "no" },
                row.spl,
                row.steps,
                row.verdict
                    .as_ref()
                    .map(|v| format!(" | verdict {v}"))
                    .unwrap_or_default(),
                row.error
                    .as_ref()
                    .map(|e| format!(" | error: {e}"))
                    .unwrap_or_default(),
            ));
        }
        let s = &self.summary;
        out.push_str(&format!(
            "episodes {} | NE {:.3} | SR {}% ({:.4}) | OSR {}% ({:.4}) | SPL {:.4}\n",
            s.episodes, s.ne_mean, s.sr_pct, s.sr, s.osr_pct, s.osr, s.spl_mean
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, success: bool, ne: f64, spl: f64) -> EpisodeRow {
        EpisodeRow {
            episode_id: id.to_string(),
            ne,
            success,
            oracle_success: success,
            spl,
            steps: 3,
            verdict: None,
            first_wrong_step: None,
            insert_outcomes: vec![],
            error: None,
        }
    }

    #[test]
    fn aggregates_are_recomputable_from_rows() {
        let report = RunReport::from_rows(vec![
            row("a", true, 0.0, 1.0),
            row("b", false, 8.0, 0.0),
        ]);
        assert_eq!(report.summary.episodes, 2);
        assert_eq!(report.summary.ne_mean, 4.0);
        assert_eq!(report.summary.sr, 0.5);
        assert_eq!(report.summary.sr_pct, 50);
        assert_eq!(report.summary.spl_mean, 0.5);
    }

    #[test]
    fn empty_report_is_well_defined() {
        let report = RunReport::from_rows(vec![]);
        assert_eq!(report.summary.episodes, 0);
        assert_eq!(report.summary.ne_mean, 0.0);
        assert_eq!(report.summary.sr_pct, 0);
    }

    #[test]
    fn report_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = RunReport::from_rows(vec![row("a", true, 0.25, 0.75)]);
        report.save(&path).unwrap();
        assert_eq!(RunReport::load(&path).unwrap(), report);
    }
}
