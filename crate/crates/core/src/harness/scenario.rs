//! The closed simulation loop: fleet physics, operator model, attacker and detector.

use super::config::{ConfigError, ScenarioConfig};
use super::metrics::{AgcOutcome, EpochRecord, LoggedMeasurement, RunMetrics, StepRecord};
use crate::agc::{scenario_2200, AgcError};
use crate::attack::{AttackContext, ShadowFleet};
use crate::detector::{check_aggregate, check_feasibility};
use crate::essm::{
    aggregated_power, build_state_vector, build_transition_matrix, build_weighted_transition_matrix, flexibility_bounds,
    make_feedback, operational_block, p_ave, predict, soc_interval, state_index, to_broadcast, track_soc_bounds,
    ControlBroadcast, EvObservation, StateLayout, StateVector, TransitionConfig, TransitionMatrix,
};
use crate::fleet::{
    apply_broadcast, collect_measurements, ev_rng, forced_charging_required, quantize_soc, sample_fleet, switch_probability,
    uncontrolled_soc, Ev,
    EvSession, EvSpec, EvStatus, FleetError, Measurement, Mode,
};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Agc(#[from] AgcError),
}

/// Replicas answer broadcasts on a stream distinct from the physical EVs'.
const SHADOW_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Ground truth over the connected fleet, never shown to the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueAggregates {
    pub x: StateVector<f64>,
    pub y: f64,
    pub y_u: f64,
    pub y_l: f64,
}

pub fn compute_true_aggregates(layout: &StateLayout, evs: &[Ev]) -> TrueAggregates {
    let live: Vec<&Ev> = evs.iter().filter(|e| e.status.connected).collect();
    let labels: Vec<usize> = live
        .iter()
        .map(|e| state_index(layout, e.reported_soc(), e.status.power_kw, e.status.forced_charging, true).expect("connected"))
        .collect();
    let x = build_state_vector::<f64>(layout, &labels);
    if live.is_empty() {
        return TrueAggregates { x, y: 0.0, y_u: 0.0, y_l: 0.0 };
    }
    let p = live.iter().map(|e| e.profile.spec.charge_kw).sum::<f64>() / live.len() as f64;
    let (y_u, y_l) = flexibility_bounds(&x, p, live.len());
    TrueAggregates { y: aggregated_power(&x, p, live.len()), x, y_u, y_l }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    connect: u64,
    disconnect: u64,
    session: usize,
}

#[derive(Debug, Clone, Copy)]
struct OperatorRecord {
    spec: EvSpec,
    session: EvSession,
    last: Measurement,
    forced: bool,
    bounds: Option<(f64, f64)>,
    /// A broadcast since the last report could have switched this EV.
    exposed: bool,
    controlled: bool,
}

impl OperatorRecord {
    fn observation(&self) -> EvObservation {
        EvObservation {
            spec: self.spec,
            session: self.session,
            soc: self.last.soc,
            power_kw: self.last.power_kw,
            forced: self.forced,
            bounds: self.bounds,
            controlled: self.controlled,
        }
    }
}

/// The operator's inference of forced charging from a report.
fn infer_forced(spec: &EvSpec, session: &EvSession, m: &Measurement, was_forced: bool, now_h: f64) -> bool {
    m.power_kw < 0.0 && (was_forced || (now_h < session.finish_h && forced_charging_required(spec, session, m.soc, now_h)))
}

/// First renewal step at or after `h`.
fn snap_up(h: f64, period_h: f64, n_p: usize) -> u64 {
    ((h / period_h - 1e-9).ceil().max(0.0) as u64) * n_p as u64
}

/// Last renewal step at or before `h`: an EV sends its final report there and
/// leaves, so no report is ever taken after its finish time.
fn snap_down(h: f64, period_h: f64, n_p: usize) -> u64 {
    ((h / period_h + 1e-9).floor().max(0.0) as u64) * n_p as u64
}

fn build_fleet(cfg: &ScenarioConfig) -> Result<(Vec<Ev>, Vec<Vec<Window>>), RunError> {
    let profiles = sample_fleet(&cfg.fleet, cfg.seed)?;
    let n_p = cfg.n_p();
    let tp = cfg.period_h();
    let mut evs = Vec::with_capacity(profiles.len());
    let mut windows = Vec::with_capacity(profiles.len());
    for p in profiles {
        let morning = p.session.shifted(-24.0);
        let mut sessions = Vec::new();
        let mut win = Vec::new();
        let mut status = EvStatus {
            soc: p.session.start_soc,
            power_kw: 0.0,
            mode: Mode::Idle,
            connected: false,
            compromised: p.compromised,
            forced_charging: false,
        };
        let mut current = None;
        let mut free_from = 0;
        let morning_end = snap_down(morning.finish_h, tp, n_p);
        if morning_end > 0 {
            sessions.push(morning);
            win.push(Window { connect: 0, disconnect: morning_end, session: 0 });
            let soc = uncontrolled_soc(&p.spec, &morning, 0.0);
            let mode = if soc < morning.departure_soc { Mode::Charging } else { Mode::Idle };
            status = EvStatus { soc, power_kw: p.spec.mode_power(mode), mode, connected: true, ..status };
            current = Some(0);
            free_from = morning_end + n_p as u64;
        }
        let start = snap_up(p.session.start_h, tp, n_p).max(free_from);
        let end = snap_down(p.session.finish_h, tp, n_p);
        if start < end {
            sessions.push(p.session);
            win.push(Window { connect: start, disconnect: end, session: sessions.len() - 1 });
        }
        evs.push(Ev { profile: p, sessions, current, status });
        windows.push(win);
    }
    Ok((evs, windows))
}

struct Operator {
    layout: StateLayout,
    records: BTreeMap<usize, OperatorRecord>,
    x: StateVector<f64>,
    a: TransitionMatrix<f64>,
    p_ave: f64,
    n: usize,
}

impl Operator {
    fn rebuild(&mut self, tcfg: &TransitionConfig) {
        let obs: Vec<EvObservation> = self.records.values().map(OperatorRecord::observation).collect();
        let labels: Vec<usize> = obs.iter().map(|o| o.label(&self.layout)).collect();
        self.x = build_state_vector(&self.layout, &labels);
        self.a = build_transition_matrix(&self.layout, &obs, &self.x, tcfg);
        self.p_ave = p_ave(&obs).unwrap_or(0.0);
        self.n = obs.len();
    }
}

impl Operator {
    /// Marks every record a broadcast could switch. At a renewal the transition
    /// matrix is rebuilt over the expected population: each exposed EV once in
    /// its reported mode and once in the mode it would switch to, weighted by
    /// the switch probability. `shifted` is the matching occupancy.
    fn absorb_broadcast(&mut self, b: &ControlBroadcast, shifted: &StateVector<f64>, tcfg: &TransitionConfig, renewal: bool) {
        let mut obs = Vec::with_capacity(self.records.len());
        let mut weights = Vec::with_capacity(self.records.len());
        for rec in self.records.values_mut() {
            let o = rec.observation();
            let hit = if o.forced {
                None
            } else {
                operational_block(&self.layout, o.soc, o.power_kw, false)
                    .and_then(|block| switch_probability(Mode::from_power(o.power_kw), block, b))
            };
            obs.push(o);
            match hit {
                Some((p, target)) => {
                    rec.exposed = true;
                    let switched = EvObservation {
                        power_kw: o.spec.mode_power(target),
                        bounds: Some(soc_interval(&o, tcfg.now_h, tcfg.period_h())),
                        controlled: true,
                        ..o
                    };
                    obs.push(switched);
                    weights.extend([1.0 - p, p]);
                }
                None => weights.push(1.0),
            }
        }
        if renewal {
            self.a = build_weighted_transition_matrix(&self.layout, &obs, &weights, shifted, tcfg);
        }
    }
}

/// Physical upward headroom: every non-forced EV able to discharge moving to full discharge.
fn upward_headroom(evs: &[Ev]) -> f64 {
    evs.iter()
        .filter(|e| e.status.connected && !e.status.forced_charging && e.status.soc > e.profile.spec.soc_min)
        .map(|e| e.profile.spec.discharge_kw - e.status.power_kw)
        .sum()
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunMetrics, RunError> {
    cfg.validate()?;
    let layout = StateLayout::new(cfg.n_s, cfg.fleet.soc_min, cfg.fleet.soc_max);
    let n_p = cfg.n_p();
    let dt = cfg.step_h();
    let total = cfg.total_steps() as u64;
    let (mut evs, windows) = build_fleet(cfg)?;
    let mut next_window: Vec<usize> = windows.iter().map(|w| usize::from(w.first().is_some_and(|w| w.connect == 0))).collect();

    let mut metrics = RunMetrics {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        attack_start_h: cfg.attack.enabled.then_some(cfg.attack.start_h),
        epsilon: cfg.detection.epsilon,
        ..Default::default()
    };
    let mut op = Operator {
        layout,
        records: BTreeMap::new(),
        x: StateVector::zeros(cfg.n_s),
        a: TransitionMatrix::identity(layout.dim()),
        p_ave: 0.0,
        n: 0,
    };
    let mut shadow = ShadowFleet::new();
    let no_drift = TransitionMatrix::identity(layout.dim());

    for k in 0..total {
        let t = k as f64 * dt;
        let attack_on = cfg.attack.active_at(t);
        if k % n_p as u64 == 0 {
            // Arrivals.
            for (i, ev) in evs.iter_mut().enumerate() {
                if let Some(w) = windows[i].get(next_window[i]) {
                    if w.connect == k {
                        let session = ev.sessions[w.session];
                        ev.current = Some(w.session);
                        ev.status = EvStatus {
                            soc: session.start_soc,
                            power_kw: ev.profile.spec.mode_power(Mode::Charging),
                            mode: Mode::Charging,
                            connected: true,
                            compromised: ev.profile.compromised,
                            forced_charging: false,
                        };
                        next_window[i] += 1;
                    }
                }
                if ev.status.connected {
                    ev.refresh_forced(t);
                }
            }
            let departing: Vec<usize> = evs
                .iter()
                .enumerate()
                .filter(|(i, e)| e.status.connected && windows[*i].iter().any(|w| Some(w.session) == e.current && w.disconnect == k))
                .map(|(i, _)| i)
                .collect();

            // Attacker.
            let mut epoch = EpochRecord {
                step: k,
                t_h: t,
                distance: None,
                cohort: op.records.len(),
                attack_active: attack_on,
                manipulated: 0,
                degraded: 0,
                fallback: false,
                attack_objective: 0.0,
            };
            let mut fabricated: BTreeMap<usize, Measurement> = BTreeMap::new();
            if attack_on {
                shadow.sync(
                    evs.iter()
                        .filter(|e| e.status.connected && e.profile.compromised)
                        .map(|e| (e, op.records.get(&e.profile.id).map(|r| r.last))),
                );
                shadow.refresh_forced(t);
                let clean: Vec<EvObservation> = if cfg.attack.sees_clean_fleet {
                    op.records.iter().filter(|(id, _)| !evs[**id].profile.compromised).map(|(_, r)| r.observation()).collect()
                } else {
                    Vec::new()
                };
                let actx = AttackContext { layout: &layout, step_h: dt, n_p, now_h: t, step: k, drift: cfg.drift };
                let out = shadow.attack_step(&actx, &cfg.attack, &clean);
                epoch.manipulated = out.manipulated;
                epoch.degraded = out.degraded;
                epoch.fallback = out.fallback;
                epoch.attack_objective = out.objective;
                fabricated = out.reports.into_iter().map(|m| (m.ev_id, m)).collect();
            } else if !shadow.is_empty() {
                shadow = ShadowFleet::new();
            }

            // Reports reaching the operator.
            let reports: Vec<Measurement> = collect_measurements(&evs, k, n_p as u64)
                .into_iter()
                .map(|m| fabricated.get(&m.ev_id).copied().unwrap_or(m))
                .collect();
            if cfg.log_measurements {
                metrics.measurements.extend(reports.iter().map(|m| {
                    let s = evs[m.ev_id].profile.spec;
                    LoggedMeasurement { m: *m, capacity_kwh: s.capacity_kwh, charge_kw: s.charge_kw, discharge_kw: s.discharge_kw, efficiency: s.efficiency }
                }));
            }

            // Per-EV feasibility and the operator's forced-charging inference.
            let mut prev_labels = Vec::with_capacity(op.records.len());
            let mut updated: BTreeMap<usize, OperatorRecord> = BTreeMap::new();
            for m in &reports {
                let ev = &evs[m.ev_id];
                let session = *ev.session().expect("connected");
                let spec = ev.profile.spec;
                let prev = op.records.get(&m.ev_id).filter(|r| r.session == session);
                let consecutive = prev.filter(|r| r.last.step + n_p as u64 == k);
                if let Some(r) = consecutive {
                    if let Ok(Some(alarm)) = check_feasibility(&r.last, m, &spec, cfg.period_h(), n_p as u64, &cfg.detection) {
                        if fabricated.contains_key(&m.ev_id) {
                            metrics.invariants.infeasible_fabrications += 1;
                        }
                        metrics.alarms.push(alarm);
                    }
                }
                let forced = infer_forced(&spec, &session, m, prev.is_some_and(|r| r.forced), t);
                let bounds = consecutive
                    .and_then(|r| track_soc_bounds(&r.observation(), t - cfg.period_h(), cfg.period_h(), m.soc, m.power_kw));
                // A mode change right after a broadcast that could have caused it is
                // attributed to the broadcast until the EV changes mode on its own.
                let controlled = match prev {
                    Some(r) if Mode::from_power(r.last.power_kw) != Mode::from_power(m.power_kw) => r.exposed,
                    Some(r) => r.controlled,
                    None => false,
                };
                let rec = OperatorRecord { spec, session, last: *m, forced, bounds, exposed: false, controlled };
                if prev.is_some() {
                    prev_labels.push(rec.observation().label(&layout));
                }
                updated.insert(m.ev_id, rec);
            }

            // Aggregate consistency against the stale prediction, over the previous population.
            if k > 0 && !op.records.is_empty() {
                let x_true = build_state_vector::<f64>(&layout, &prev_labels);
                if let Ok(alarm) = check_aggregate(&x_true, &op.x, &cfg.detection, k) {
                    epoch.distance = Some(x_true.distance(&op.x, cfg.detection.norm));
                    if let Some(a) = alarm {
                        metrics.alarms.push(a);
                    }
                }
            }

            // Departures leave after their final report.
            for &i in &departing {
                updated.remove(&i);
                evs[i].status.connected = false;
                evs[i].status.power_kw = 0.0;
                evs[i].status.mode = Mode::Idle;
                evs[i].status.forced_charging = false;
                evs[i].current = None;
            }
            op.records = updated;
            let tcfg = TransitionConfig { step_h: dt, n_p, now_h: t, drift: cfg.drift };
            op.rebuild(&tcfg);
            metrics.invariants.checked_epochs += 1;
            if op.n > 0 && !op.x.is_distribution(1e-9) {
                metrics.invariants.state_sum_violations += 1;
            }
            if !op.a.is_column_stochastic(1e-9) {
                metrics.invariants.stochastic_violations += 1;
            }
            metrics.epochs.push(epoch);
        }

        // Flexibility report and control.
        let y_est = aggregated_power(&op.x, op.p_ave, op.n);
        let (y_u_est, y_l_est) = flexibility_bounds(&op.x, op.p_ave, op.n);
        let truth = compute_true_aggregates(&layout, &evs);
        let mut dp_r = None;
        let mut saturated = false;
        let fleet_power = |evs: &[Ev]| -> f64 { evs.iter().filter(|e| e.status.connected).map(|e| e.status.power_kw).sum() };
        let before = fleet_power(&evs);
        let request = if cfg.control { cfg.dispatch.request(t, dt, op.p_ave, op.n) } else { 0.0 };
        let event_headroom = (cfg.control && cfg.dispatch.event_kw(t, dt) != 0.0).then(|| upward_headroom(&evs));
        if request != 0.0 {
            let fb = make_feedback(&op.x, y_est, y_est + request, op.p_ave, op.n);
            saturated = fb.saturated;
            dp_r = Some(request);
            // EVs switch first and then drift, so the expected shift is applied before A.
            match (to_broadcast(&fb, &op.x), predict(&op.x, &no_drift, &fb)) {
                (Ok(b), Ok(shifted)) => {
                    let tcfg = TransitionConfig { step_h: dt, n_p, now_h: t, drift: cfg.drift };
                    op.absorb_broadcast(&b, &shifted, &tcfg, k % n_p as u64 == 0);
                    op.x = op.a.apply(&shifted);
                    if !fb.is_zero() {
                        for ev in evs.iter_mut().filter(|e| e.status.connected) {
                            let st = ev.status;
                            // Bins are located on the reported SoC, the same grid the operator uses.
                            let block = operational_block(&layout, quantize_soc(st.soc), st.power_kw, st.forced_charging);
                            let mut rng = ev_rng(cfg.seed, ev.profile.id, k);
                            ev.status = apply_broadcast(&st, &ev.profile.spec, block, &b, &mut rng);
                        }
                        if attack_on && cfg.attack.follow_broadcasts {
                            shadow.apply_broadcast(&layout, &b, cfg.seed ^ SHADOW_STREAM_SALT, k);
                        }
                    }
                }
                _ => {
                    metrics.invariants.feedback_failures += 1;
                    op.x = op.a.apply(&op.x);
                }
            }
        } else {
            op.x = op.a.apply(&op.x);
        }
        let dp_ev = fleet_power(&evs) - before;

        if let (Some(flexibility), Some(e)) = (event_headroom, cfg.dispatch.event) {
            let delivered = dp_ev.clamp(0.0, flexibility);
            let report = scenario_2200(&cfg.agc, flexibility, e.kw, delivered)?;
            metrics.agc = Some(AgcOutcome { flexibility_true_kw: flexibility, dispatched_kw: e.kw, delivered_kw: delivered, report });
        }

        metrics.steps.push(StepRecord {
            step: k,
            t_h: t,
            n_connected: op.n,
            y_est,
            y_u_est,
            y_l_est,
            y_true: truth.y,
            y_u_true: truth.y_u,
            y_l_true: truth.y_l,
            dp_r,
            dp_ev,
            saturated,
        });

        for ev in evs.iter_mut().filter(|e| e.status.connected) {
            ev.advance(dt)?;
        }
        if attack_on {
            shadow.advance(dt);
        }
    }

    Ok(metrics)
}
