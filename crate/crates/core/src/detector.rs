//! Operator-side checks: aggregate consistency at each model renewal and
//! per-EV feasibility of consecutive reports.

use crate::essm::{Norm, StateVector};
use crate::fleet::{quantize_steps, EvSpec, Measurement, G_SOC, SOC_STEPS};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("state vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("measurements of EV {ev_id} at steps {prev} and {cur} are not one period apart")]
    NotConsecutive { ev_id: usize, prev: u64, cur: u64 },
    #[error("measurements belong to different EVs ({0} and {1})")]
    DifferentEv(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub epsilon: f64,
    pub norm: Norm,
    pub granularity: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, norm: Norm::L1, granularity: G_SOC }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlarmKind {
    Aggregate,
    Feasibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub kind: AlarmKind,
    pub step: u64,
    /// Distance for aggregate alarms, the offending SoC change for feasibility alarms.
    pub value: f64,
    pub ev_id: Option<usize>,
    pub details: String,
}

impl fmt::Display for Alarm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AlarmKind::Aggregate => "aggregate",
            AlarmKind::Feasibility => "feasibility",
        };
        match self.ev_id {
            Some(id) => write!(f, "step={} kind={} ev={} value={:.6} {}", self.step, kind, id, self.value, self.details),
            None => write!(f, "step={} kind={} value={:.6} {}", self.step, kind, self.value, self.details),
        }
    }
}

/// Alarm iff the distance between the rebuilt and predicted distributions reaches ε.
pub fn check_aggregate<T: Scalar>(
    x_true: &StateVector<T>,
    x_est: &StateVector<T>,
    cfg: &DetectionConfig,
    step: u64,
) -> Result<Option<Alarm>, DetectorError> {
    if x_true.x.len() != x_est.x.len() {
        return Err(DetectorError::Length(x_true.x.len(), x_est.x.len()));
    }
    let d = x_true.distance(x_est, cfg.norm).to_f64().unwrap_or(f64::INFINITY);
    Ok((d >= cfg.epsilon).then(|| Alarm {
        kind: AlarmKind::Aggregate,
        step,
        value: d,
        ev_id: None,
        details: format!("distance {d:.6} >= epsilon {}", cfg.epsilon),
    }))
}

/// Largest SoC rise and fall (in grid steps) an EV can report over one period.
/// The energy bounds are rounded away from zero onto the reporting grid.
pub fn soc_step_bounds(spec: &EvSpec, period_h: f64, granularity: f64) -> (i64, i64) {
    let rise = spec.charge_kw * period_h / spec.capacity_kwh;
    let fall = spec.discharge_kw * period_h / (spec.efficiency * spec.capacity_kwh);
    let up = (rise / granularity - 1e-9).ceil() as i64;
    let down = (fall / granularity - 1e-9).ceil() as i64;
    (up, down)
}

pub fn power_within_limits(spec: &EvSpec, power_kw: f64) -> bool {
    power_kw >= -spec.charge_kw - 1e-9 && power_kw <= spec.discharge_kw + 1e-9
}

/// The feasibility predicate on a pair of consecutive reports.
pub fn feasible_pair(prev_soc: f64, cur_soc: f64, cur_power: f64, spec: &EvSpec, period_h: f64, granularity: f64) -> bool {
    let steps = ((cur_soc - prev_soc) / granularity).round() as i64;
    let (up, down) = soc_step_bounds(spec, period_h, granularity);
    (-down..=up).contains(&steps) && power_within_limits(spec, cur_power)
}

/// Checks two consecutive reports of one EV taken `n_p` steps apart.
pub fn check_feasibility(
    prev: &Measurement,
    cur: &Measurement,
    spec: &EvSpec,
    period_h: f64,
    n_p: u64,
    cfg: &DetectionConfig,
) -> Result<Option<Alarm>, DetectorError> {
    if prev.ev_id != cur.ev_id {
        return Err(DetectorError::DifferentEv(prev.ev_id, cur.ev_id));
    }
    if cur.step != prev.step + n_p {
        return Err(DetectorError::NotConsecutive { ev_id: cur.ev_id, prev: prev.step, cur: cur.step });
    }
    if feasible_pair(prev.soc, cur.soc, cur.power_kw, spec, period_h, cfg.granularity) {
        return Ok(None);
    }
    let ds = cur.soc - prev.soc;
    let details = if power_within_limits(spec, cur.power_kw) {
        format!("soc change {ds:+.4} exceeds the energy bound")
    } else {
        format!("power {:.3} kW outside [-{}, {}]", cur.power_kw, spec.charge_kw, spec.discharge_kw)
    };
    Ok(Some(Alarm {
        kind: AlarmKind::Feasibility,
        step: cur.step,
        value: ds,
        ev_id: Some(cur.ev_id),
        details,
    }))
}

/// Whether a reported SoC lies on the reporting grid.
pub fn on_grid(soc: f64) -> bool {
    (quantize_steps(soc) as f64 / SOC_STEPS as f64 - soc).abs() < 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> EvSpec {
        EvSpec { capacity_kwh: 30.0, charge_kw: 6.0, discharge_kw: 8.0, efficiency: 0.9, soc_min: 0.05, soc_max: 0.95 }
    }

    fn m(step: u64, soc: f64, p: f64) -> Measurement {
        Measurement { ev_id: 1, soc, power_kw: p, step }
    }

    #[test]
    fn aggregate_threshold_is_strict() {
        let cfg = DetectionConfig::default();
        let mut a = StateVector::<f64>::zeros(1);
        a.x = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(check_aggregate(&a, &a, &cfg, 0).unwrap(), None);
        let mut b = a.clone();
        b.x[0] = 0.49;
        b.x[1] = 0.51;
        assert!(check_aggregate(&a, &b, &cfg, 0).unwrap().is_some());
        b.x[0] = 0.4955;
        b.x[1] = 0.5045;
        assert_eq!(check_aggregate(&a, &b, &cfg, 0).unwrap(), None);
        assert!(check_aggregate(&a, &StateVector::zeros(2), &cfg, 0).is_err());
    }

    #[test]
    fn feasibility_examples() {
        let cfg = DetectionConfig::default();
        let tp = 1.0 / 12.0;
        let s = spec();
        assert_eq!(soc_step_bounds(&EvSpec { charge_kw: 6.0, ..s }, tp, 0.01).0, 2);
        assert_eq!(check_feasibility(&m(0, 0.5, 0.0), &m(15, 0.5, 0.0), &s, tp, 15, &cfg).unwrap(), None);
        assert_eq!(check_feasibility(&m(0, 0.5, -6.0), &m(15, 0.52, -6.0), &s, tp, 15, &cfg).unwrap(), None);
        let a = check_feasibility(&m(0, 0.5, -6.0), &m(15, 0.55, -6.0), &s, tp, 15, &cfg).unwrap().unwrap();
        assert_eq!(a.kind, AlarmKind::Feasibility);
        let a = check_feasibility(&m(0, 0.5, 0.0), &m(15, 0.5, 10.0), &s, tp, 15, &cfg).unwrap();
        assert!(a.unwrap().details.contains("power"));
        // 8 kW for 5 min on 30 kWh at 0.9 is 2.47 points, so a 3-point fall is allowed.
        assert_eq!(check_feasibility(&m(0, 0.5, 8.0), &m(15, 0.47, 8.0), &s, tp, 15, &cfg).unwrap(), None);
        assert!(check_feasibility(&m(0, 0.5, 8.0), &m(15, 0.46, 8.0), &s, tp, 15, &cfg).unwrap().is_some());
        assert!(check_feasibility(&m(0, 0.5, 0.0), &m(14, 0.5, 0.0), &s, tp, 15, &cfg).is_err());
    }

    mod props {
        use super::*;
        use crate::fleet::{quantize_soc, step_ev, Mode};
        use proptest::prelude::*;

        fn arb_spec() -> impl Strategy<Value = EvSpec> {
            (20.0..80.0f64, 3.0..11.0f64, 3.0..11.0f64, 0.8..=1.0f64).prop_map(|(q, pc, pd, eta)| EvSpec {
                capacity_kwh: q,
                charge_kw: pc,
                discharge_kw: pd,
                efficiency: eta,
                soc_min: 0.05,
                soc_max: 0.95,
            })
        }

        proptest! {
            #[test]
            fn honest_reports_never_alarm(
                spec in arb_spec(),
                soc in 0.05..=0.95f64,
                modes in prop::collection::vec(0u8..3, 15),
            ) {
                let dt = 20.0 / 3600.0;
                let mut s = soc;
                let mut last = Mode::Idle;
                for &m in &modes {
                    last = [Mode::Charging, Mode::Idle, Mode::Discharging][m as usize];
                    s = step_ev(&spec, s, spec.mode_power(last), dt).unwrap().soc;
                }
                let cfg = DetectionConfig::default();
                let prev = Measurement { ev_id: 3, soc: quantize_soc(soc), power_kw: 0.0, step: 0 };
                let cur = Measurement { ev_id: 3, soc: quantize_soc(s), power_kw: spec.mode_power(last), step: 15 };
                prop_assert_eq!(check_feasibility(&prev, &cur, &spec, 15.0 * dt, 15, &cfg).unwrap(), None);
            }

            #[test]
            fn ten_point_jump_always_alarms(spec in arb_spec(), pct in 5u32..=85, m in 0u8..3, up: bool) {
                let cfg = DetectionConfig::default();
                let from = pct as f64 / 100.0;
                let to = if up { from + 0.10 } else { from };
                let (from, to) = if up { (from, to) } else { (from + 0.10, from) };
                let power = spec.mode_power([Mode::Charging, Mode::Idle, Mode::Discharging][m as usize]);
                let prev = Measurement { ev_id: 1, soc: from, power_kw: power, step: 30 };
                let cur = Measurement { ev_id: 1, soc: to, power_kw: power, step: 45 };
                let alarm = check_feasibility(&prev, &cur, &spec, 1.0 / 12.0, 15, &cfg).unwrap();
                prop_assert!(alarm.is_some_and(|a| a.kind == AlarmKind::Feasibility));
            }

            #[test]
            fn aggregate_alarm_matches_threshold(a in prop::collection::vec(0.0..1.0f64, 6), b in prop::collection::vec(0.0..1.0f64, 6)) {
                let cfg = DetectionConfig::default();
                let norm = |v: Vec<f64>| {
                    let t: f64 = v.iter().sum::<f64>().max(1e-9);
                    StateVector { x: v.iter().map(|x| x / t).collect(), n_s: 1 }
                };
                let (x, y) = (norm(a), norm(b));
                let d = x.distance(&y, Norm::L1);
                prop_assert_eq!(check_aggregate(&x, &y, &cfg, 7).unwrap().is_some(), d >= cfg.epsilon);
            }
        }
    }
}
