//! EV population: sampling, per-vehicle battery physics, autonomous mode rules
//! and the measurement channel.

use crate::essm::ControlBroadcast;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reported SoC granularity: one percentage point.
pub const SOC_STEPS: u32 = 100;
pub const G_SOC: f64 = 1.0 / SOC_STEPS as f64;

/// Slack for power-limit comparisons (kW).
const POWER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FleetError {
    #[error("invalid fleet configuration: {0}")]
    Config(String),
    #[error("power {power_kw} kW outside [-{charge_kw}, {discharge_kw}]")]
    Physics {
        power_kw: f64,
        charge_kw: f64,
        discharge_kw: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Charging,
    Idle,
    Discharging,
}

impl Mode {
    /// Mode implied by the sign of a power reading (negative = charging).
    pub fn from_power(power_kw: f64) -> Self {
        if power_kw < 0.0 {
            Mode::Charging
        } else if power_kw > 0.0 {
            Mode::Discharging
        } else {
            Mode::Idle
        }
    }

    /// Sign of the SoC change this mode produces.
    pub fn soc_direction(self) -> f64 {
        match self {
            Mode::Charging => 1.0,
            Mode::Idle => 0.0,
            Mode::Discharging => -1.0,
        }
    }

    pub fn block(self) -> usize {
        match self {
            Mode::Charging => 0,
            Mode::Idle => 1,
            Mode::Discharging => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvSpec {
    pub capacity_kwh: f64,
    pub charge_kw: f64,
    pub discharge_kw: f64,
    pub efficiency: f64,
    pub soc_min: f64,
    pub soc_max: f64,
}

impl EvSpec {
    /// Power drawn or delivered by this EV in `mode`: negative while charging, positive while discharging.
    pub fn mode_power(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Charging => -self.charge_kw,
            Mode::Idle => 0.0,
            Mode::Discharging => self.discharge_kw,
        }
    }

    /// SoC change per hour when operating in `mode` at rated power.
    pub fn soc_rate(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Charging => self.charge_kw * self.efficiency / self.capacity_kwh,
            Mode::Idle => 0.0,
            Mode::Discharging => -self.discharge_kw / (self.efficiency * self.capacity_kwh),
        }
    }
}

/// Times are absolute simulation hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub start_h: f64,
    pub finish_h: f64,
    pub start_soc: f64,
    pub departure_soc: f64,
}

impl EvSession {
    pub fn shifted(&self, hours: f64) -> Self {
        Self {
            start_h: self.start_h + hours,
            finish_h: self.finish_h + hours,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvStatus {
    pub soc: f64,
    pub power_kw: f64,
    pub mode: Mode,
    pub connected: bool,
    pub compromised: bool,
    pub forced_charging: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub ev_id: usize,
    pub soc: f64,
    pub power_kw: f64,
    pub step: u64,
}

/// One-time message sent when an EV plugs in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionMessage {
    pub ev_id: usize,
    pub session: EvSession,
    pub first: Measurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetParams {
    pub start_soc: TruncatedNormal,
    pub departure_soc: TruncatedNormal,
    /// Hours after `anchor_hour` on the arrival evening.
    pub start_offset_h: TruncatedNormal,
    /// Clock hour of departure on the following day.
    pub finish_clock_h: TruncatedNormal,
    pub power_kw: UniformRange,
    pub efficiency: UniformRange,
    pub capacity_kwh: UniformRange,
    pub soc_min: f64,
    pub soc_max: f64,
    pub size: usize,
    pub compromised_fraction: f64,
    pub anchor_hour: f64,
}

impl Default for FleetParams {
    fn default() -> Self {
        Self {
            start_soc: TruncatedNormal { mean: 0.2, std: 0.05, lo: 0.2, hi: 0.4 },
            departure_soc: TruncatedNormal { mean: 0.85, std: 0.03, lo: 0.75, hi: 0.95 },
            start_offset_h: TruncatedNormal { mean: -6.5, std: 3.4, lo: 0.0, hi: 5.5 },
            finish_clock_h: TruncatedNormal { mean: 8.9, std: 3.4, lo: 0.0, hi: 20.9 },
            power_kw: UniformRange { lo: 6.0, hi: 8.0 },
            efficiency: UniformRange { lo: 0.88, hi: 0.95 },
            capacity_kwh: UniformRange { lo: 20.0, hi: 40.0 },
            soc_min: 0.05,
            soc_max: 0.95,
            size: 10_000,
            compromised_fraction: 0.30,
            anchor_hour: 18.0,
        }
    }
}

impl FleetParams {
    pub fn validate(&self) -> Result<(), FleetError> {
        let tn = [
            ("start_soc", self.start_soc),
            ("departure_soc", self.departure_soc),
            ("start_offset_h", self.start_offset_h),
            ("finish_clock_h", self.finish_clock_h),
        ];
        for (name, d) in tn {
            if !(d.lo < d.hi) || !(d.std > 0.0) || !d.mean.is_finite() {
                return Err(FleetError::Config(format!("{name}: degenerate truncated normal")));
            }
        }
        let un = [
            ("power_kw", self.power_kw),
            ("efficiency", self.efficiency),
            ("capacity_kwh", self.capacity_kwh),
        ];
        for (name, d) in un {
            if !(d.lo < d.hi) {
                return Err(FleetError::Config(format!("{name}: empty uniform range")));
            }
        }
        if !(self.power_kw.lo > 0.0 && self.capacity_kwh.lo > 0.0) {
            return Err(FleetError::Config("power and capacity must be positive".into()));
        }
        if !(self.efficiency.lo > 0.0 && self.efficiency.hi <= 1.0) {
            return Err(FleetError::Config("efficiency must lie in (0, 1]".into()));
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(FleetError::Config("need 0 <= soc_min < soc_max <= 1".into()));
        }
        if self.start_soc.lo < self.soc_min || self.departure_soc.hi > self.soc_max {
            return Err(FleetError::Config("SoC targets must lie within [soc_min, soc_max]".into()));
        }
        if self.start_soc.hi > self.departure_soc.lo {
            return Err(FleetError::Config("start SoC range must lie below departure SoC range".into()));
        }
        if !(0.0..=1.0).contains(&self.compromised_fraction) {
            return Err(FleetError::Config("compromised_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Static description of one sampled EV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvProfile {
    pub id: usize,
    pub spec: EvSpec,
    pub session: EvSession,
    pub compromised: bool,
}

fn draw_truncated<R: Rng>(d: TruncatedNormal, rng: &mut R) -> f64 {
    let normal = Normal::new(d.mean, d.std).expect("validated std");
    loop {
        let v = normal.sample(rng);
        if (d.lo..=d.hi).contains(&v) {
            return v;
        }
    }
}

fn draw_uniform<R: Rng>(d: UniformRange, rng: &mut R) -> f64 {
    Uniform::new_inclusive(d.lo, d.hi).expect("validated range").sample(rng)
}

/// Samples the fleet. Sessions start on the arrival evening and end the next day;
/// each EV uses one power rating for both directions.
pub fn sample_fleet(params: &FleetParams, seed: u64) -> Result<Vec<EvProfile>, FleetError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Vec::with_capacity(params.size);
    for id in 0..params.size {
        let power = draw_uniform(params.power_kw, &mut rng);
        let spec = EvSpec {
            capacity_kwh: draw_uniform(params.capacity_kwh, &mut rng),
            charge_kw: power,
            discharge_kw: power,
            efficiency: draw_uniform(params.efficiency, &mut rng),
            soc_min: params.soc_min,
            soc_max: params.soc_max,
        };
        let start_soc = draw_truncated(params.start_soc, &mut rng);
        let departure_soc = draw_truncated(params.departure_soc, &mut rng);
        let start_h = params.anchor_hour + draw_truncated(params.start_offset_h, &mut rng);
        let finish_h = 24.0 + draw_truncated(params.finish_clock_h, &mut rng);
        fleet.push(EvProfile {
            id,
            spec,
            session: EvSession {
                start_h,
                finish_h,
                start_soc,
                departure_soc,
            },
            compromised: false,
        });
    }
    let n_comp = (params.compromised_fraction * params.size as f64).round() as usize;
    for idx in sample(&mut rng, params.size, n_comp.min(params.size)) {
        fleet[idx].compromised = true;
    }
    Ok(fleet)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub soc: f64,
    /// The SoC hit a limit during the step and was clamped.
    pub clamped: bool,
}

/// Advances the SoC over `dt_h` hours at constant `power_kw`.
pub fn step_ev(spec: &EvSpec, soc: f64, power_kw: f64, dt_h: f64) -> Result<StepOutcome, FleetError> {
    if power_kw < -spec.charge_kw - POWER_TOL || power_kw > spec.discharge_kw + POWER_TOL {
        return Err(FleetError::Physics {
            power_kw,
            charge_kw: spec.charge_kw,
            discharge_kw: spec.discharge_kw,
        });
    }
    let next = if power_kw < 0.0 {
        soc - power_kw * spec.efficiency * dt_h / spec.capacity_kwh
    } else if power_kw > 0.0 {
        soc - power_kw / spec.efficiency * dt_h / spec.capacity_kwh
    } else {
        soc
    };
    if next >= spec.soc_max && power_kw < 0.0 {
        Ok(StepOutcome { soc: spec.soc_max, clamped: true })
    } else if next <= spec.soc_min && power_kw > 0.0 {
        Ok(StepOutcome { soc: spec.soc_min, clamped: true })
    } else {
        Ok(StepOutcome {
            soc: next.clamp(spec.soc_min, spec.soc_max),
            clamped: false,
        })
    }
}

/// True when charging at full power from now on barely (or no longer) reaches
/// the departure SoC.
pub fn forced_charging_required(spec: &EvSpec, session: &EvSession, soc: f64, now_h: f64) -> bool {
    let remaining_energy = (session.departure_soc - soc) * spec.capacity_kwh;
    if remaining_energy <= 0.0 {
        return false;
    }
    let hours_needed = remaining_energy / (spec.efficiency * spec.charge_kw);
    hours_needed >= session.finish_h - now_h
}

/// Reported SoC in grid steps: nearest multiple of `G_SOC`, ties rounded up.
pub fn quantize_steps(soc: f64) -> u32 {
    (soc * SOC_STEPS as f64 + 0.5 + 1e-9).floor().max(0.0) as u32
}

pub fn quantize_soc(soc: f64) -> f64 {
    quantize_steps(soc) as f64 / SOC_STEPS as f64
}

/// Probability that a non-forced EV in `mode` and operational block `block`
/// (1-based) switches under `broadcast`, and the mode it switches to.
pub fn switch_probability(mode: Mode, block: usize, broadcast: &ControlBroadcast) -> Option<(f64, Mode)> {
    let j = block - 1;
    let (prob, target) = match (mode, broadcast.cde > 0) {
        (Mode::Charging, true) => (broadcast.u_s[j], Mode::Idle),
        (Mode::Idle, true) => (broadcast.v_s[j], Mode::Discharging),
        (Mode::Idle, false) => (broadcast.u_s[j], Mode::Charging),
        (Mode::Discharging, false) => (broadcast.v_s[j], Mode::Idle),
        _ => return None,
    };
    (prob > 0.0).then_some((prob.min(1.0), target))
}

/// Applies a broadcast to an EV given its operational SoC block (1-based) and mode.
/// Special-state and forced EVs never react. Draws at most one uniform variate.
pub fn apply_broadcast<R: Rng>(
    status: &EvStatus,
    spec: &EvSpec,
    soc_block: Option<usize>,
    broadcast: &ControlBroadcast,
    rng: &mut R,
) -> EvStatus {
    let Some(block) = soc_block else {
        return *status;
    };
    if !status.connected || status.forced_charging {
        return *status;
    }
    let Some((prob, target)) = switch_probability(status.mode, block, broadcast) else {
        return *status;
    };
    if prob >= 1.0 || rng.random::<f64>() < prob {
        EvStatus {
            mode: target,
            power_kw: spec.mode_power(target),
            ..*status
        }
    } else {
        *status
    }
}

/// Counter-based substream: the draw for (ev, step) does not depend on how
/// many other draws happened before it.
pub fn ev_rng(seed: u64, ev_id: usize, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ev_id as u64);
    rng.set_word_pos(step as u128 * 16);
    rng
}

/// A live EV: its profile, the sessions it will attend and its physical state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ev {
    pub profile: EvProfile,
    pub sessions: Vec<EvSession>,
    pub current: Option<usize>,
    pub status: EvStatus,
}

impl Ev {
    pub fn session(&self) -> Option<&EvSession> {
        self.current.map(|i| &self.sessions[i])
    }

    pub fn reported_soc(&self) -> f64 {
        quantize_soc(self.status.soc)
    }

    pub fn measurement(&self, step: u64) -> Measurement {
        Measurement {
            ev_id: self.profile.id,
            soc: self.reported_soc(),
            power_kw: self.status.power_kw,
            step,
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.status.mode = mode;
        self.status.power_kw = self.profile.spec.mode_power(mode);
    }

    /// One physics step of `dt_h` hours, including the autonomous rules:
    /// stop at the departure target when charging up to it, and go idle at a limit.
    pub fn advance(&mut self, dt_h: f64) -> Result<(), FleetError> {
        if !self.status.connected || self.status.mode == Mode::Idle {
            return Ok(());
        }
        let spec = self.profile.spec;
        let before = self.status.soc;
        let out = step_ev(&spec, before, self.status.power_kw, dt_h)?;
        self.status.soc = out.soc;
        let target = self.session().map(|s| s.departure_soc).unwrap_or(spec.soc_max);
        if self.status.mode == Mode::Charging && before < target && out.soc >= target {
            self.status.soc = target.min(out.soc);
            self.status.forced_charging = false;
            self.set_mode(Mode::Idle);
        } else if out.clamped {
            self.status.forced_charging = false;
            self.set_mode(Mode::Idle);
        }
        Ok(())
    }

    /// Evaluated at each reporting instant on the EV's own (unrounded) SoC.
    pub fn refresh_forced(&mut self, now_h: f64) {
        if !self.status.connected || self.status.forced_charging {
            return;
        }
        let Some(session) = self.session().copied() else { return };
        if now_h < session.finish_h && forced_charging_required(&self.profile.spec, &session, self.status.soc, now_h) {
            self.status.forced_charging = true;
            self.set_mode(Mode::Charging);
        }
    }
}

/// Only steps on the reporting cadence emit measurements.
pub fn collect_measurements(evs: &[Ev], step: u64, n_p: u64) -> Vec<Measurement> {
    if step % n_p != 0 {
        return Vec::new();
    }
    evs.iter()
        .filter(|ev| ev.status.connected)
        .map(|ev| ev.measurement(step))
        .collect()
}

/// Uncontrolled charging from plug-in until `now_h` (used to seed sessions
/// already in progress when the simulation starts).
pub fn uncontrolled_soc(spec: &EvSpec, session: &EvSession, now_h: f64) -> f64 {
    let elapsed = (now_h - session.start_h).max(0.0);
    (session.start_soc + spec.soc_rate(Mode::Charging) * elapsed).min(session.departure_soc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec30() -> EvSpec {
        EvSpec {
            capacity_kwh: 30.0,
            charge_kw: 6.0,
            discharge_kw: 6.0,
            efficiency: 0.9,
            soc_min: 0.05,
            soc_max: 0.95,
        }
    }

    #[test]
    fn charging_step_matches_hand_evaluation() {
        let s = step_ev(&spec30(), 0.5, -6.0, 1.0 / 12.0).unwrap();
        assert!((s.soc - 0.515).abs() < 1e-12);
    }

    #[test]
    fn discharging_step_matches_hand_evaluation() {
        let s = step_ev(&spec30(), 0.5, 6.0, 1.0 / 12.0).unwrap();
        assert!((s.soc - (0.5 - 6.0 / 0.9 / 12.0 / 30.0)).abs() < 1e-12);
        assert!((s.soc - 0.4815).abs() < 1e-4);
    }

    #[test]
    fn idle_step_is_identity() {
        for soc in [0.05, 0.3, 0.95] {
            assert_eq!(step_ev(&spec30(), soc, 0.0, 0.25).unwrap().soc, soc);
        }
    }

    #[test]
    fn over_limit_power_is_rejected() {
        assert!(matches!(
            step_ev(&spec30(), 0.5, -6.5, 0.1),
            Err(FleetError::Physics { .. })
        ));
    }

    #[test]
    fn clamps_at_limits() {
        let s = step_ev(&spec30(), 0.94, -6.0, 1.0).unwrap();
        assert_eq!(s, StepOutcome { soc: 0.95, clamped: true });
        let s = step_ev(&spec30(), 0.06, 6.0, 1.0).unwrap();
        assert_eq!(s, StepOutcome { soc: 0.05, clamped: true });
    }

    #[test]
    fn forced_charging_examples() {
        let spec = spec30();
        let session = EvSession {
            start_h: 0.0,
            finish_h: 3.3,
            start_soc: 0.25,
            departure_soc: 0.85,
        };
        assert!(forced_charging_required(&spec, &session, 0.25, 0.0));
        assert!(!forced_charging_required(&spec, &session, 0.85, 0.0));
        let relaxed = EvSession { finish_h: 100.0, ..session };
        assert!(!forced_charging_required(&spec, &relaxed, 0.25, 0.0));
    }

    #[test]
    fn quantization_rounds_to_nearest_percent() {
        assert_eq!(quantize_soc(0.5149), 0.51);
        assert_eq!(quantize_soc(0.515), 0.52);
        assert_eq!(quantize_soc(0.5151), 0.52);
        assert_eq!(quantize_steps(0.95), 95);
    }

    fn status(mode: Mode) -> EvStatus {
        EvStatus {
            soc: 0.45,
            power_kw: spec30().mode_power(mode),
            mode,
            connected: true,
            compromised: false,
            forced_charging: false,
        }
    }

    fn broadcast(u: f64, v: f64, cde: i8) -> ControlBroadcast {
        ControlBroadcast {
            u_s: vec![u; 10],
            v_s: vec![v; 10],
            cde,
        }
    }

    #[test]
    fn certain_switches() {
        let mut rng = ev_rng(1, 0, 0);
        let spec = spec30();
        let out = apply_broadcast(&status(Mode::Charging), &spec, Some(5), &broadcast(1.0, 0.0, 1), &mut rng);
        assert_eq!((out.mode, out.power_kw), (Mode::Idle, 0.0));
        let out = apply_broadcast(&status(Mode::Idle), &spec, Some(5), &broadcast(0.0, 1.0, 1), &mut rng);
        assert_eq!((out.mode, out.power_kw), (Mode::Discharging, 6.0));
        let out = apply_broadcast(&status(Mode::Discharging), &spec, Some(5), &broadcast(1.0, 1.0, 1), &mut rng);
        assert_eq!(out, status(Mode::Discharging));
    }

    #[test]
    fn special_and_forced_evs_ignore_broadcasts() {
        let mut rng = ev_rng(1, 0, 0);
        let spec = spec30();
        let b = broadcast(1.0, 1.0, -1);
        assert_eq!(apply_broadcast(&status(Mode::Idle), &spec, None, &b, &mut rng), status(Mode::Idle));
        let forced = EvStatus { forced_charging: true, ..status(Mode::Charging) };
        assert_eq!(apply_broadcast(&forced, &spec, Some(3), &b, &mut rng), forced);
    }

    #[test]
    fn sampling_counts_compromised_and_is_deterministic() {
        let params = FleetParams { size: 1000, ..Default::default() };
        let a = sample_fleet(&params, 7).unwrap();
        let b = sample_fleet(&params, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|e| e.compromised).count(), 300);
        let none = sample_fleet(&FleetParams { compromised_fraction: 0.0, ..params.clone() }, 7).unwrap();
        assert!(none.iter().all(|e| !e.compromised));
        for ev in &a {
            assert!(ev.session.start_h < ev.session.finish_h);
            assert!((18.0..=23.5).contains(&ev.session.start_h));
            assert!(ev.session.start_soc <= ev.session.departure_soc);
            assert!((6.0..=8.0).contains(&ev.spec.charge_kw));
        }
    }

    #[test]
    fn invalid_ranges_are_config_errors() {
        let mut p = FleetParams::default();
        p.capacity_kwh = UniformRange { lo: 40.0, hi: 20.0 };
        assert!(matches!(sample_fleet(&p, 0), Err(FleetError::Config(_))));
        let p = FleetParams { compromised_fraction: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn off_cadence_steps_emit_nothing() {
        let profile = EvProfile {
            id: 3,
            spec: spec30(),
            session: EvSession { start_h: 0.0, finish_h: 10.0, start_soc: 0.3, departure_soc: 0.8 },
            compromised: false,
        };
        let mut ev = Ev {
            profile,
            sessions: vec![profile.session],
            current: Some(0),
            status: EvStatus { soc: 0.5149, ..status(Mode::Idle) },
        };
        assert!(collect_measurements(std::slice::from_ref(&ev), 7, 15).is_empty());
        let m = collect_measurements(std::slice::from_ref(&ev), 15, 15);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].soc, 0.51);
        ev.status.connected = false;
        assert!(collect_measurements(std::slice::from_ref(&ev), 15, 15).is_empty());
    }

    mod props {
        use super::*;
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
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn lossless_round_trip(spec in arb_spec(), soc in 0.2..0.8f64, p in 0.5..3.0f64, dt in 1e-3..0.05f64) {
                let spec = EvSpec { efficiency: 1.0, ..spec };
                let up = step_ev(&spec, soc, -p, dt).unwrap();
                prop_assume!(!up.clamped);
                let back = step_ev(&spec, up.soc, p, dt).unwrap();
                prop_assert!((back.soc - soc).abs() <= f64::EPSILON * up.soc.max(soc));
            }

            #[test]
            fn soc_stays_within_limits(
                spec in arb_spec(),
                soc in 0.05..=0.95f64,
                modes in prop::collection::vec(0u8..3, 1..200),
                dt in 1e-3..0.5f64,
            ) {
                let mut s = soc;
                for m in modes {
                    let mode = [Mode::Charging, Mode::Idle, Mode::Discharging][m as usize];
                    s = step_ev(&spec, s, spec.mode_power(mode), dt).unwrap().soc;
                    prop_assert!((spec.soc_min..=spec.soc_max).contains(&s));
                }
            }

            #[test]
            fn switch_count_concentrates(p in 0.0..=1.0f64, seed in any::<u64>()) {
                let n = 2000;
                let b = broadcast(p, 0.0, 1);
                let st = status(Mode::Charging);
                let switched = (0..n)
                    .filter(|&id| apply_broadcast(&st, &spec30(), Some(5), &b, &mut ev_rng(seed, id, 0)).mode == Mode::Idle)
                    .count() as f64;
                let sd = (n as f64 * p * (1.0 - p)).sqrt();
                prop_assert!((switched - n as f64 * p).abs() <= 5.0 * sd + 1.0, "{} of {} at p={}", switched, n, p);
            }

            #[test]
            fn zero_broadcast_keeps_mode(m in 0u8..3, block in 1usize..=10, cde in prop::sample::select(vec![-1i8, 1]), seed in any::<u64>()) {
                let mode = [Mode::Charging, Mode::Idle, Mode::Discharging][m as usize];
                let st = status(mode);
                let mut rng = ev_rng(seed, 0, 0);
                let out = apply_broadcast(&st, &spec30(), Some(block), &broadcast(0.0, 0.0, cde), &mut rng);
                prop_assert_eq!(out, st);
            }
        }
    }
}
