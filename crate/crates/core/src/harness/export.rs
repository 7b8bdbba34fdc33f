//! Writes a run's records to an output directory.

use super::metrics::RunMetrics;
use crate::detector::{check_feasibility, Alarm, DetectionConfig};
use crate::fleet::{EvSpec, Measurement};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("summary encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Serialize)]
struct FlexRow {
    step: u64,
    t_h: f64,
    n_connected: usize,
    y_est: f64,
    y_u_est: f64,
    y_l_est: f64,
    y_true: f64,
    y_u_true: f64,
    y_l_true: f64,
}

#[derive(Serialize)]
struct ControlRow {
    step: u64,
    t_h: f64,
    dp_r: Option<f64>,
    dp_ev: f64,
    saturated: bool,
}

#[derive(Serialize)]
struct AgcRow {
    t_s: f64,
    df1_hz: f64,
    df2_hz: f64,
    ptie_pu: f64,
    pm1_pu: f64,
    pm2_pu: f64,
    ev_pu: f64,
}

/// One row of measurements.csv: a report as the operator received it, with the EV's registered spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub ev_id: usize,
    pub step: u64,
    pub soc: f64,
    pub power_kw: f64,
    pub capacity_kwh: f64,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub efficiency: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.to_path_buf(), source }
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<(), ExportError> {
    let csv_err = |source| ExportError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Files written: flexibility.csv, control.csv, epochs.csv, alarms.log, summary.json, and
/// agc.csv / measurements.csv when the run produced them. Returns the paths.
pub fn export_run(metrics: &RunMetrics, dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let p = dir.join("flexibility.csv");
    write_csv(
        &p,
        metrics.steps.iter().map(|r| FlexRow {
            step: r.step,
            t_h: r.t_h,
            n_connected: r.n_connected,
            y_est: r.y_est,
            y_u_est: r.y_u_est,
            y_l_est: r.y_l_est,
            y_true: r.y_true,
            y_u_true: r.y_u_true,
            y_l_true: r.y_l_true,
        }),
    )?;
    written.push(p);

    let p = dir.join("control.csv");
    write_csv(
        &p,
        metrics.steps.iter().map(|r| ControlRow { step: r.step, t_h: r.t_h, dp_r: r.dp_r, dp_ev: r.dp_ev, saturated: r.saturated }),
    )?;
    written.push(p);

    let p = dir.join("epochs.csv");
    write_csv(&p, metrics.epochs.iter())?;
    written.push(p);

    let p = dir.join("alarms.log");
    write_alarm_log(&p, &metrics.alarms)?;
    written.push(p);

    if let Some(agc) = &metrics.agc {
        let p = dir.join("agc.csv");
        write_csv(
            &p,
            agc.report.series.iter().map(|s| AgcRow {
                t_s: s.t,
                df1_hz: s.state.df[0],
                df2_hz: s.state.df[1],
                ptie_pu: s.state.ptie,
                pm1_pu: s.state.pm[0],
                pm2_pu: s.state.pm[1],
                ev_pu: s.ev,
            }),
        )?;
        written.push(p);
    }

    if !metrics.measurements.is_empty() {
        let p = dir.join("measurements.csv");
        write_csv(
            &p,
            metrics.measurements.iter().map(|m| MeasurementRow {
                ev_id: m.m.ev_id,
                step: m.m.step,
                soc: m.m.soc,
                power_kw: m.m.power_kw,
                capacity_kwh: m.capacity_kwh,
                charge_kw: m.charge_kw,
                discharge_kw: m.discharge_kw,
                efficiency: m.efficiency,
            }),
        )?;
        written.push(p);
    }

    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&metrics.summary())?).map_err(io_err(&p))?;
    written.push(p);
    Ok(written)
}

/// One alarm per line after a `#` header, so the file still loads in gnuplot.
pub fn write_alarm_log(path: &Path, alarms: &[Alarm]) -> Result<(), ExportError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    writeln!(f, "# step kind ev value details").map_err(io_err(path))?;
    for a in alarms {
        writeln!(f, "{a}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_measurements(path: &Path) -> Result<Vec<MeasurementRow>, ExportError> {
    let csv_err = |source| ExportError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(csv_err)
}

/// Re-runs the per-EV feasibility check over a recorded log. Pairs are formed from
/// consecutive reports of one EV taken `n_p` steps apart; gaps start a new session.
pub fn replay_feasibility(rows: &[MeasurementRow], period_h: f64, n_p: u64, cfg: &DetectionConfig) -> Vec<Alarm> {
    let mut by_ev: BTreeMap<usize, Vec<&MeasurementRow>> = BTreeMap::new();
    for r in rows {
        by_ev.entry(r.ev_id).or_default().push(r);
    }
    let mut alarms = Vec::new();
    for list in by_ev.values_mut() {
        list.sort_by_key(|r| r.step);
        for w in list.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.step != a.step + n_p {
                continue;
            }
            let spec = EvSpec {
                capacity_kwh: b.capacity_kwh,
                charge_kw: b.charge_kw,
                discharge_kw: b.discharge_kw,
                efficiency: b.efficiency,
                soc_min: 0.0,
                soc_max: 1.0,
            };
            let m = |r: &MeasurementRow| Measurement { ev_id: r.ev_id, soc: r.soc, power_kw: r.power_kw, step: r.step };
            if let Ok(Some(alarm)) = check_feasibility(&m(a), &m(b), &spec, period_h, n_p, cfg) {
                alarms.push(alarm);
            }
        }
    }
    alarms.sort_by_key(|a| (a.step, a.ev_id));
    alarms
}
