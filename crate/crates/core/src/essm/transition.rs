//! Construction of the per-step transition matrix from the latest reports.

use super::{state_index, EssmError, StateLayout, StateVector, TransitionMatrix};
use crate::fleet::{forced_charging_required, quantize_soc, EvSession, EvSpec, Mode, G_SOC};
use crate::scalar::{Dense, Scalar};
use serde::{Deserialize, Serialize};

/// What the operator knows about one connected EV at a renewal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvObservation {
    pub spec: EvSpec,
    pub session: EvSession,
    /// Reported (quantized) SoC.
    pub soc: f64,
    pub power_kw: f64,
    pub forced: bool,
    /// Range the true SoC is known to lie in, when tracked across reports.
    pub bounds: Option<(f64, f64)>,
    /// The current mode may have been set by a broadcast rather than by the EV itself.
    pub controlled: bool,
}

impl EvObservation {
    pub fn label(&self, layout: &StateLayout) -> usize {
        state_index(layout, self.soc, self.power_kw, self.forced, true).expect("connected")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftModel {
    /// Uniform-within-block drift at fleet-average rates.
    FleetAverage,
    /// Per-block rates from forecasting every reported EV over one period.
    Forecast,
    /// Forecast split, with per-block rates tuned so the period-ahead
    /// prediction reproduces the forecast occupancy of every block.
    #[default]
    Matched,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionConfig {
    /// Control step T in hours.
    pub step_h: f64,
    /// Steps per reporting period.
    pub n_p: usize,
    pub now_h: f64,
    pub drift: DriftModel,
}

impl TransitionConfig {
    pub fn period_h(&self) -> f64 {
        self.step_h * self.n_p as f64
    }
}

/// Mean rated charging power of the observed EVs.
pub fn p_ave(obs: &[EvObservation]) -> Result<f64, EssmError> {
    if obs.is_empty() {
        return Err(EssmError::EmptyFleet);
    }
    Ok(obs.iter().map(|o| o.spec.charge_kw).sum::<f64>() / obs.len() as f64)
}

const SUBSAMPLES: usize = 8;

/// Label an EV is expected to report one period ahead, assuming its true SoC is
/// `soc_true` now and it receives no broadcast.
pub fn forecast_label(layout: &StateLayout, o: &EvObservation, soc_true: f64, now_h: f64, horizon_h: f64) -> usize {
    let spec = &o.spec;
    let mut forced = o.forced;
    let mut mode = if forced { Mode::Charging } else { Mode::from_power(o.power_kw) };
    let mut soc = soc_true.clamp(spec.soc_min, spec.soc_max);
    let end = soc + spec.soc_rate(mode) * horizon_h;
    match mode {
        Mode::Charging => {
            if soc < o.session.departure_soc && end >= o.session.departure_soc {
                soc = o.session.departure_soc;
                mode = Mode::Idle;
                forced = false;
            } else if end >= spec.soc_max {
                soc = spec.soc_max;
                mode = Mode::Idle;
                forced = false;
            } else {
                soc = end;
            }
        }
        Mode::Discharging => {
            if end <= spec.soc_min {
                soc = spec.soc_min;
                mode = Mode::Idle;
            } else {
                soc = end;
            }
        }
        Mode::Idle => {}
    }
    let t = now_h + horizon_h;
    let live = t < o.session.finish_h;
    if !forced && live && forced_charging_required(spec, &o.session, soc, t) {
        mode = Mode::Charging;
    }
    // The operator cannot see the EV's own decision: a charging report is labelled
    // forced if it already was, or if the rounded SoC demands it.
    let rep = quantize_soc(soc);
    let fcs = mode == Mode::Charging && (o.forced || (live && forced_charging_required(spec, &o.session, rep, t)));
    state_index(layout, rep, spec.mode_power(mode), fcs, true).expect("connected")
}

/// Sparse column-stochastic matrix used while building.
struct Columns {
    cols: Vec<Vec<(usize, f64)>>,
}

impl Columns {
    fn identity(dim: usize) -> Self {
        Self { cols: (0..dim).map(|j| vec![(j, 1.0)]).collect() }
    }

    /// Column `j` with total exit rate `q` split by `shares` (destination, weight summing to 1).
    fn set(&mut self, j: usize, q: f64, shares: &[(usize, f64)]) {
        let mut col = vec![(j, 1.0 - q)];
        col.extend(shares.iter().map(|&(i, w)| (i, q * w)));
        self.cols[j] = col;
    }

    fn step(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, col) in self.cols.iter().enumerate() {
            if x[j] != 0.0 {
                for &(i, a) in col {
                    out[i] += a * x[j];
                }
            }
        }
    }

    fn evolve(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = vec![0.0; x.len()];
        for _ in 0..n {
            self.step(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    fn into_dense<T: Scalar>(self) -> Dense<T> {
        let n = self.cols.len();
        let mut a = Dense::zeros(n, n);
        for (j, col) in self.cols.into_iter().enumerate() {
            for (i, v) in col {
                a[(i, j)] = a[(i, j)] + T::lit(v);
            }
        }
        a
    }
}

fn per_step(f: f64, n_p: usize) -> f64 {
    if f >= 1.0 {
        1.0
    } else {
        1.0 - (1.0 - f).powf(1.0 / n_p as f64)
    }
}

/// Range of true SoC consistent with a report: the rounding cell, narrowed by
/// what the EV's current mode implies. A charging EV is below its departure
/// target; an EV not in forced charging is above the level that would force it.
/// Two reports pin it exactly: the first one of a session (the start SoC is
/// announced on connection) and an idle EV parked at its departure target.
/// Neither the parking pin nor the charging cap holds once a broadcast may have
/// chosen the mode.
pub fn soc_interval(o: &EvObservation, now_h: f64, period_h: f64) -> (f64, f64) {
    let s = &o.session;
    let rounds_to = |v: f64| (quantize_soc(v) - o.soc).abs() < 1e-9;
    let since_start = now_h - s.start_h;
    if o.bounds.is_none() && (0.0..period_h).contains(&since_start) && rounds_to(s.start_soc) {
        return (s.start_soc, s.start_soc);
    }
    if !o.controlled && !o.forced && Mode::from_power(o.power_kw) == Mode::Idle && rounds_to(s.departure_soc) {
        return (s.departure_soc, s.departure_soc);
    }
    let (mut lo, mut hi) = o.bounds.unwrap_or((o.soc - 0.5 * G_SOC, o.soc + 0.5 * G_SOC));
    if o.forced || (!o.controlled && Mode::from_power(o.power_kw) == Mode::Charging) {
        hi = hi.min(s.departure_soc);
    }
    if !o.forced && now_h < s.finish_h {
        let reach = (s.finish_h - now_h) * o.spec.efficiency * o.spec.charge_kw / o.spec.capacity_kwh;
        lo = lo.max(s.departure_soc - reach);
    }
    if lo > hi {
        let mid = 0.5 * (lo + hi);
        return (mid, mid);
    }
    (lo, hi)
}

/// Carries the true-SoC range of an EV from its previous report (taken at
/// `prev_now_h`) to a new one, assuming it kept its mode over the period.
/// `None` when the mode changed or the ranges do not meet.
pub fn track_soc_bounds(prev: &EvObservation, prev_now_h: f64, period_h: f64, soc: f64, power_kw: f64) -> Option<(f64, f64)> {
    let mode = Mode::from_power(prev.power_kw);
    if mode != Mode::from_power(power_kw) {
        return None;
    }
    let (lo, hi) = soc_interval(prev, prev_now_h, period_h);
    let spec = &prev.spec;
    let shift = spec.soc_rate(mode) * period_h;
    let lo = (lo + shift).clamp(spec.soc_min, spec.soc_max).max(soc - 0.5 * G_SOC);
    let hi = (hi + shift).clamp(spec.soc_min, spec.soc_max).min(soc + 0.5 * G_SOC);
    (lo <= hi).then_some((lo, hi))
}

/// Period-ahead forecast transition shares, per source state (0-based).
/// `None` for states with no observed EV.
fn forecast_shares(layout: &StateLayout, obs: &[EvObservation], weights: &[f64], cfg: &TransitionConfig) -> Vec<Option<Vec<f64>>> {
    let dim = layout.dim();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; dim];
    let horizon = cfg.period_h();
    for (o, &w) in obs.iter().zip(weights) {
        if w <= 0.0 {
            continue;
        }
        let from = o.label(layout) - 1;
        let row = out[from].get_or_insert_with(|| vec![0.0; dim]);
        let (lo, hi) = soc_interval(o, cfg.now_h, horizon);
        for q in 0..SUBSAMPLES {
            let s = lo + (hi - lo) * (q as f64 + 0.5) / SUBSAMPLES as f64;
            row[forecast_label(layout, o, s, cfg.now_h, horizon) - 1] += w;
        }
    }
    for row in out.iter_mut().flatten() {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn fleet_average(layout: &StateLayout, obs: &[EvObservation], weights: &[f64], cfg: &TransitionConfig) -> (Columns, Vec<Option<(f64, Vec<(usize, f64)>)>>) {
    let n_s = layout.n_s;
    let dim = layout.dim();
    let mut cols = Columns::identity(dim);
    let mut spec_cols = vec![None; dim];
    if obs.is_empty() {
        return (cols, spec_cols);
    }
    let n = obs.len() as f64;
    let eta = obs.iter().map(|o| o.spec.efficiency).sum::<f64>() / n;
    let q_bar = obs.iter().map(|o| o.spec.capacity_kwh).sum::<f64>() / n;
    let pc = obs.iter().map(|o| o.spec.charge_kw).sum::<f64>() / n;
    let pd = obs.iter().map(|o| o.spec.discharge_kw).sum::<f64>() / n;
    let p_c = (pc * eta * cfg.step_h / q_bar / layout.width()).min(1.0);
    let p_d = (pd * cfg.step_h / (eta * q_bar) / layout.width()).min(1.0);

    // Forced-charging inflow per block from the period-ahead forecast.
    let fcs = layout.fcs() - 1;
    let forecast = forecast_shares(layout, obs, weights, cfg);
    let fcs_rate = |j: usize| forecast[j].as_ref().map_or(0.0, |r| per_step(r[fcs], cfg.n_p));

    for b in 0..n_s {
        let cm = b;
        let up = if b + 1 < n_s { cm + 1 } else { layout.ss_max() - 1 };
        let r = fcs_rate(cm);
        spec_cols[cm] = Some(shares_of(&[(up, p_c), (fcs, r)]));
        let im = n_s + b;
        let r = fcs_rate(im);
        spec_cols[im] = Some(shares_of(&[(fcs, r)]));
        let dm = 2 * n_s + b;
        let down = if b > 0 { dm - 1 } else { layout.ss_min() - 1 };
        let r = fcs_rate(dm);
        spec_cols[dm] = Some(shares_of(&[(down, p_d), (fcs, r)]));
    }
    for (j, c) in spec_cols.iter().enumerate() {
        if let Some((q, shares)) = c {
            cols.set(j, *q, shares);
        }
    }
    (cols, spec_cols)
}

/// Total rate and normalized split of a list of (destination, rate).
fn shares_of(rates: &[(usize, f64)]) -> (f64, Vec<(usize, f64)>) {
    let total: f64 = rates.iter().map(|r| r.1).sum::<f64>().min(1.0);
    let raw: f64 = rates.iter().map(|r| r.1).sum();
    if raw <= 0.0 {
        return (0.0, Vec::new());
    }
    (total, rates.iter().filter(|r| r.1 > 0.0).map(|&(i, r)| (i, r / raw)).collect())
}

/// Builds the per-step matrix A (x(k+1) = A x(k)) from the latest observations.
/// `x` is the state vector of the same observations; it is only used by the
/// matched drift model.
pub fn build_transition_matrix<T: Scalar>(
    layout: &StateLayout,
    obs: &[EvObservation],
    x: &StateVector<T>,
    cfg: &TransitionConfig,
) -> TransitionMatrix<T> {
    build_weighted_transition_matrix(layout, obs, &vec![1.0; obs.len()], x, cfg)
}

/// As [`build_transition_matrix`], with each observation counted at `weights[i]`
/// (an EV that switched mode with probability p enters once per mode, weighted
/// 1 − p and p). `x` must be the matching weighted occupancy.
pub fn build_weighted_transition_matrix<T: Scalar>(
    layout: &StateLayout,
    obs: &[EvObservation],
    weights: &[f64],
    x: &StateVector<T>,
    cfg: &TransitionConfig,
) -> TransitionMatrix<T> {
    assert_eq!(obs.len(), weights.len(), "one weight per observation");
    let (mut cols, _) = fleet_average(layout, obs, weights, cfg);
    if cfg.drift == DriftModel::FleetAverage || obs.is_empty() {
        return TransitionMatrix { a: cols.into_dense() };
    }
    let dim = layout.dim();
    let forecast = forecast_shares(layout, obs, weights, cfg);
    let mut splits: Vec<Option<(f64, Vec<(usize, f64)>)>> = vec![None; dim];
    for (j, row) in forecast.iter().enumerate() {
        let Some(row) = row else { continue };
        let f = 1.0 - row[j];
        let shares: Vec<(usize, f64)> = if f > 0.0 {
            row.iter().enumerate().filter(|&(i, &v)| i != j && v > 0.0).map(|(i, &v)| (i, v / f)).collect()
        } else {
            Vec::new()
        };
        cols.set(j, per_step(f.max(0.0), cfg.n_p), &shares);
        splits[j] = Some((f, shares));
    }
    if cfg.drift == DriftModel::Matched {
        let x0: Vec<f64> = x.x.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
        let mut target = vec![0.0; dim];
        for (j, row) in forecast.iter().enumerate() {
            if let Some(row) = row {
                for (i, &v) in row.iter().enumerate() {
                    target[i] += v * x0[j];
                }
            }
        }
        let n_s = layout.n_s;
        let order: Vec<usize> = (0..n_s)
            .chain((2 * n_s..3 * n_s).rev())
            .chain(n_s..2 * n_s)
            .chain(3 * n_s..dim)
            .collect();
        for _sweep in 0..2 {
            for &j in &order {
                let Some((f, shares)) = &splits[j] else { continue };
                if x0[j] <= 0.0 || *f <= 0.0 || shares.is_empty() {
                    continue;
                }
                let mass_at = |cols: &mut Columns, q: f64| {
                    cols.set(j, q, shares);
                    cols.evolve(&x0, cfg.n_p)[j]
                };
                let (mut lo, mut hi) = (0.0, 1.0);
                if mass_at(&mut cols, 0.0) <= target[j] {
                    hi = 0.0;
                } else if mass_at(&mut cols, 1.0) >= target[j] {
                    lo = 1.0;
                } else {
                    for _ in 0..50 {
                        let mid = 0.5 * (lo + hi);
                        if mass_at(&mut cols, mid) > target[j] {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                }
                cols.set(j, 0.5 * (lo + hi), shares);
            }
        }
    }
    TransitionMatrix { a: cols.into_dense() }
}
