//! Scenario configuration, the simulation loop, metrics and file export.

pub mod config;
pub mod export;
pub mod metrics;
pub mod scenario;

pub use export::{export_run, read_measurements, replay_feasibility, write_alarm_log, ExportError, MeasurementRow};

pub use config::{ConfigError, DispatchEvent, DispatchSchedule, ScenarioConfig};
pub use metrics::{mape, AgcOutcome, EpochRecord, InvariantCounts, MetricError, RunMetrics, RunSummary, StepRecord};
pub use scenario::{compute_true_aggregates, run_scenario, RunError, TrueAggregates};
