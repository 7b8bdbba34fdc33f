//! Per-step and per-period records, and the summary derived from them.

use crate::agc::AgcRunReport;
use crate::detector::{Alarm, AlarmKind};
use crate::fleet::Measurement;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("no record has a non-zero dispatch request")]
    NoQualifyingRecords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub t_h: f64,
    pub n_connected: usize,
    pub y_est: f64,
    pub y_u_est: f64,
    pub y_l_est: f64,
    pub y_true: f64,
    pub y_u_true: f64,
    pub y_l_true: f64,
    /// Correction requested at this step; `None` when nothing was dispatched.
    pub dp_r: Option<f64>,
    /// Change in true fleet power caused by this step's broadcast.
    pub dp_ev: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub step: u64,
    pub t_h: f64,
    /// Distance between the rebuilt and predicted distributions (absent on the first period).
    pub distance: Option<f64>,
    pub cohort: usize,
    pub attack_active: bool,
    pub manipulated: usize,
    pub degraded: usize,
    pub fallback: bool,
    pub attack_objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct InvariantCounts {
    pub checked_epochs: usize,
    pub state_sum_violations: usize,
    pub stochastic_violations: usize,
    pub infeasible_fabrications: usize,
    pub feedback_failures: usize,
}

impl InvariantCounts {
    pub fn total_violations(&self) -> usize {
        self.state_sum_violations + self.stochastic_violations + self.infeasible_fabrications + self.feedback_failures
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgcOutcome {
    pub flexibility_true_kw: f64,
    pub dispatched_kw: f64,
    pub delivered_kw: f64,
    pub report: AgcRunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedMeasurement {
    #[serde(flatten)]
    pub m: Measurement,
    pub capacity_kwh: f64,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub seed: u64,
    pub config_hash: String,
    pub attack_start_h: Option<f64>,
    pub epsilon: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub alarms: Vec<Alarm>,
    pub invariants: InvariantCounts,
    pub agc: Option<AgcOutcome>,
    pub measurements: Vec<LoggedMeasurement>,
}

/// Mean of |delivered − requested| / |requested| over records with a non-zero request.
pub fn mape<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> Result<f64, MetricError> {
    let (sum, n) = records
        .into_iter()
        .filter_map(|r| r.dp_r.filter(|v| *v != 0.0).map(|req| (r.dp_ev - req).abs() / req.abs()))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(MetricError::NoQualifyingRecords);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub epochs: usize,
    pub aggregate_alarms: usize,
    pub feasibility_alarms: usize,
    pub mape: Option<f64>,
    pub mape_pre_attack: Option<f64>,
    pub mape_post_attack: Option<f64>,
    /// Share of periods whose rebuilt distribution lies within ε of the prediction.
    pub tracking_fraction: Option<f64>,
    pub max_distance: Option<f64>,
    pub manipulated_reports: usize,
    pub invariants: InvariantCounts,
    pub agc: Option<AgcOutcome>,
}

impl RunMetrics {
    pub fn count_alarms(&self, kind: AlarmKind) -> usize {
        self.alarms.iter().filter(|a| a.kind == kind).count()
    }

    pub fn mape_window(&self, from_h: f64, to_h: f64) -> Result<f64, MetricError> {
        mape(self.steps.iter().filter(|r| r.t_h >= from_h - 1e-9 && r.t_h < to_h - 1e-9))
    }

    pub fn tracking_fraction(&self) -> Option<f64> {
        let d: Vec<f64> = self.epochs.iter().filter_map(|e| e.distance).collect();
        (!d.is_empty()).then(|| d.iter().filter(|&&v| v < self.epsilon).count() as f64 / d.len() as f64)
    }

    pub fn summary(&self) -> RunSummary {
        let end = f64::INFINITY;
        let (pre, post) = match self.attack_start_h {
            Some(s) => (self.mape_window(0.0, s).ok(), self.mape_window(s, end).ok()),
            None => (None, None),
        };
        RunSummary {
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            steps: self.steps.len(),
            epochs: self.epochs.len(),
            aggregate_alarms: self.count_alarms(AlarmKind::Aggregate),
            feasibility_alarms: self.count_alarms(AlarmKind::Feasibility),
            mape: mape(&self.steps).ok(),
            mape_pre_attack: pre,
            mape_post_attack: post,
            tracking_fraction: self.tracking_fraction(),
            max_distance: self.epochs.iter().filter_map(|e| e.distance).reduce(f64::max),
            manipulated_reports: self.epochs.iter().map(|e| e.manipulated).sum(),
            invariants: self.invariants,
            agc: self.agc.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dp_r: Option<f64>, dp_ev: f64) -> StepRecord {
        StepRecord {
            step: 0,
            t_h: 0.0,
            n_connected: 1,
            y_est: 0.0,
            y_u_est: 0.0,
            y_l_est: 0.0,
            y_true: 0.0,
            y_u_true: 0.0,
            y_l_true: 0.0,
            dp_r,
            dp_ev,
            saturated: false,
        }
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[rec(Some(5.0), 5.0), rec(Some(-2.0), -2.0)]), Ok(0.0));
        assert!((mape(&[rec(Some(50.0), 25.95)]).unwrap() - 0.481).abs() < 1e-12);
        assert_eq!(mape(&[rec(Some(0.0), 3.0), rec(None, 1.0)]), Err(MetricError::NoQualifyingRecords));
    }
}
