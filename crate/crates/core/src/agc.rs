//! Two-area load-frequency control with the EV fleet as a resource in area 1.
//! Non-reheat turbines, droop governors, pure integral AGC, fixed-step RK4.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgcError {
    #[error("state became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("invalid AGC parameters: {0}")]
    Params(String),
    #[error("delivered power {delivered} kW exceeds the true flexibility {flexibility} kW")]
    Delivery { delivered: f64, flexibility: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaParams {
    /// Inertia constant (s).
    pub h: f64,
    /// Load damping (p.u./Hz).
    pub d: f64,
    /// Droop (Hz/p.u.).
    pub r: f64,
    pub t_g: f64,
    pub t_t: f64,
    pub k_a: f64,
    /// Frequency bias (p.u./Hz).
    pub b: f64,
    /// Remaining upward mechanical headroom (p.u.); `None` disables the limit.
    pub headroom_pu: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgcParams {
    pub areas: [AreaParams; 2],
    pub k_t: f64,
    pub base_mva: f64,
}

impl Default for AgcParams {
    fn default() -> Self {
        // 200 MW maximum against a 190 MW operating point on the 400 MVA base.
        let headroom = Some(0.5 - 0.475);
        Self {
            areas: [
                AreaParams { h: 10.0, d: 0.6, r: 0.05, t_g: 0.2, t_t: 0.5, k_a: 0.3, b: 20.6, headroom_pu: headroom },
                AreaParams { h: 8.0, d: 0.9, r: 0.0625, t_g: 0.3, t_t: 0.6, k_a: 0.3, b: 16.9, headroom_pu: headroom },
            ],
            k_t: 2.0,
            base_mva: 400.0,
        }
    }
}

impl AgcParams {
    pub fn unconstrained(mut self) -> Self {
        for a in &mut self.areas {
            a.headroom_pu = None;
        }
        self
    }

    pub fn validate(&self) -> Result<(), AgcError> {
        for (i, a) in self.areas.iter().enumerate() {
            if !(a.h > 0.0 && a.t_g > 0.0 && a.t_t > 0.0 && a.r > 0.0) {
                return Err(AgcError::Params(format!("area {}: H, R and time constants must be positive", i + 1)));
            }
        }
        if !(self.base_mva > 0.0) {
            return Err(AgcError::Params("base power must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AgcState<T> {
    pub df: [T; 2],
    pub pg: [T; 2],
    pub pm: [T; 2],
    pub ace_int: [T; 2],
    pub ptie: T,
}

impl<T: Scalar> AgcState<T> {
    pub fn zero() -> Self {
        Self { df: [T::zero(); 2], pg: [T::zero(); 2], pm: [T::zero(); 2], ace_int: [T::zero(); 2], ptie: T::zero() }
    }

    fn to_array(self) -> [T; 9] {
        [self.df[0], self.df[1], self.pg[0], self.pg[1], self.pm[0], self.pm[1], self.ace_int[0], self.ace_int[1], self.ptie]
    }

    fn from_array(a: [T; 9]) -> Self {
        Self { df: [a[0], a[1]], pg: [a[2], a[3]], pm: [a[4], a[5]], ace_int: [a[6], a[7]], ptie: a[8] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn ace(&self, params: &AgcParams) -> [T; 2] {
        [
            T::lit(params.areas[0].b) * self.df[0] + self.ptie,
            T::lit(params.areas[1].b) * self.df[1] - self.ptie,
        ]
    }

    /// Mechanical power change after the headroom limit.
    pub fn effective_pm(&self, params: &AgcParams) -> [T; 2] {
        let mut out = self.pm;
        for (v, a) in out.iter_mut().zip(&params.areas) {
            if let Some(h) = a.headroom_pu {
                *v = v.min(T::lit(h));
            }
        }
        out
    }
}

/// Time derivative of the LFC state for the given disturbances (p.u.).
pub fn derivatives<T: Scalar>(s: &AgcState<T>, params: &AgcParams, load: [T; 2], ev: T) -> AgcState<T> {
    let sign = [T::one(), -T::one()];
    let pm = s.effective_pm(params);
    let mut d = AgcState::zero();
    for i in 0..2 {
        let a = &params.areas[i];
        let ev_i = if i == 0 { ev } else { T::zero() };
        d.df[i] = (pm[i] - load[i] - sign[i] * s.ptie + ev_i - T::lit(a.d) * s.df[i]) / T::lit(2.0 * a.h);
        let pc = -T::lit(a.k_a) * s.ace_int[i];
        d.pg[i] = (pc - s.df[i] / T::lit(a.r) - s.pg[i]) / T::lit(a.t_g);
        d.pm[i] = (s.pg[i] - s.pm[i]) / T::lit(a.t_t);
        d.ace_int[i] = T::lit(a.b) * s.df[i] + sign[i] * s.ptie;
    }
    d.ptie = T::lit(2.0 * std::f64::consts::PI * params.k_t) * (s.df[0] - s.df[1]);
    d
}

/// One classical RK4 step of y' = f(t, y).
pub fn rk4_step<T: Scalar, const N: usize>(f: impl Fn(T, &[T; N]) -> [T; N], t: T, y: &[T; N], dt: T) -> [T; N] {
    let half = dt / T::lit(2.0);
    let axpy = |a: &[T; N], k: &[T; N], h: T| -> [T; N] { std::array::from_fn(|i| a[i] + h * k[i]) };
    let k1 = f(t, y);
    let k2 = f(t + half, &axpy(y, &k1, half));
    let k3 = f(t + half, &axpy(y, &k2, half));
    let k4 = f(t + dt, &axpy(y, &k3, dt));
    let six = T::lit(6.0);
    std::array::from_fn(|i| y[i] + dt / six * (k1[i] + T::lit(2.0) * k2[i] + T::lit(2.0) * k3[i] + k4[i]))
}

/// Disturbances as functions of time (s): per-area load change and EV injection, in p.u.
pub trait AgcInputs<T> {
    fn load(&self, t: T) -> [T; 2];
    fn ev(&self, t: T) -> T;
}

/// Step disturbances: a load step in each area and an EV injection step in area 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInputs {
    pub load_pu: [f64; 2],
    pub load_at_s: f64,
    pub ev_pu: f64,
    pub ev_at_s: f64,
}

impl<T: Scalar> AgcInputs<T> for StepInputs {
    fn load(&self, t: T) -> [T; 2] {
        if t >= T::lit(self.load_at_s) {
            [T::lit(self.load_pu[0]), T::lit(self.load_pu[1])]
        } else {
            [T::zero(); 2]
        }
    }

    fn ev(&self, t: T) -> T {
        if t >= T::lit(self.ev_at_s) {
            T::lit(self.ev_pu)
        } else {
            T::zero()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgcSample<T> {
    pub t: T,
    pub state: AgcState<T>,
    pub ev: T,
}

/// Fixed-step RK4 from the zero state with piecewise-constant inputs; returns every `record_every`-th sample
/// (and always the last one).
pub fn integrate<T: Scalar, I: AgcInputs<T>>(
    params: &AgcParams,
    inputs: &I,
    dt: T,
    duration: T,
    record_every: usize,
) -> Result<Vec<AgcSample<T>>, AgcError> {
    params.validate()?;
    let steps = (duration / dt).round().to_usize().unwrap_or(0);
    let every = record_every.max(1);
    let mut y = AgcState::<T>::zero().to_array();
    let mut out = vec![AgcSample { t: T::zero(), state: AgcState::zero(), ev: inputs.ev(T::zero()) }];
    let half = dt / T::lit(2.0);
    for k in 0..steps {
        let t = T::from_usize_lossy(k) * dt;
        // Disturbances are held over the step, sampled at its midpoint, so a
        // step edge never falls inside an RK4 stage.
        let (load, ev) = (inputs.load(t + half), inputs.ev(t + half));
        y = rk4_step(|_, y: &[T; 9]| derivatives(&AgcState::from_array(*y), params, load, ev).to_array(), t, &y, dt);
        let state = AgcState::from_array(y);
        if !state.is_finite() {
            return Err(AgcError::Divergence { step: k + 1 });
        }
        if (k + 1) % every == 0 || k + 1 == steps {
            let t1 = T::from_usize_lossy(k + 1) * dt;
            out.push(AgcSample { t: t1, state, ev: inputs.ev(t1) });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgcRunReport {
    pub load_step_mw: f64,
    pub dispatched_mw: f64,
    pub delivered_mw: f64,
    /// Dispatched minus delivered EV power.
    pub shortfall_mw: f64,
    /// Shortfall left after the conventional units exhaust their headroom.
    pub net_imbalance_mw: f64,
    pub peak_abs_df_hz: [f64; 2],
    pub min_ptie_pu: f64,
    pub max_ptie_pu: f64,
    pub final_df_hz: [f64; 2],
    #[serde(skip)]
    pub series: Vec<AgcSample<f64>>,
}

pub const SCENARIO_DT_S: f64 = 0.01;
pub const SCENARIO_DURATION_S: f64 = 120.0;

/// The evening load-step scenario: the load in area 1 rises by the dispatched
/// amount at t = 1 s and the fleet injects `delivered_kw` 100 ms later.
pub fn scenario_2200(
    params: &AgcParams,
    flexibility_true_kw: f64,
    dispatched_kw: f64,
    delivered_kw: f64,
) -> Result<AgcRunReport, AgcError> {
    if delivered_kw > flexibility_true_kw + 1e-9 {
        return Err(AgcError::Delivery { delivered: delivered_kw, flexibility: flexibility_true_kw });
    }
    let base_kw = params.base_mva * 1000.0;
    let inputs = StepInputs {
        load_pu: [dispatched_kw / base_kw, 0.0],
        load_at_s: 1.0,
        ev_pu: delivered_kw / base_kw,
        ev_at_s: 1.1,
    };
    let series = integrate::<f64, _>(params, &inputs, SCENARIO_DT_S, SCENARIO_DURATION_S, 10)?;
    let mut peak = [0.0f64; 2];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &series {
        for i in 0..2 {
            peak[i] = peak[i].max(s.state.df[i].abs());
        }
        lo = lo.min(s.state.ptie);
        hi = hi.max(s.state.ptie);
    }
    let headroom_mw: f64 = params.areas.iter().map(|a| a.headroom_pu.unwrap_or(f64::INFINITY)).sum::<f64>() * params.base_mva;
    let shortfall_mw = (dispatched_kw - delivered_kw) / 1000.0;
    let last = series.last().expect("non-empty series").state;
    Ok(AgcRunReport {
        load_step_mw: dispatched_kw / 1000.0,
        dispatched_mw: dispatched_kw / 1000.0,
        delivered_mw: delivered_kw / 1000.0,
        shortfall_mw,
        net_imbalance_mw: (shortfall_mw - headroom_mw).max(0.0),
        peak_abs_df_hz: peak,
        min_ptie_pu: lo,
        max_ptie_pu: hi,
        final_df_hz: last.df,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_has_zero_derivative() {
        let p = AgcParams::default();
        let d = derivatives::<f64>(&AgcState::zero(), &p, [0.0; 2], 0.0);
        assert_eq!(d, AgcState::zero());
    }

    #[test]
    fn load_increase_depresses_frequency() {
        let p = AgcParams::default();
        let d = derivatives::<f64>(&AgcState::zero(), &p, [0.1, 0.0], 0.0);
        assert!(d.df[0] < 0.0);
    }

    #[test]
    fn symmetric_areas_keep_tie_flow_at_zero() {
        let mut p = AgcParams::default().unconstrained();
        p.areas[1] = p.areas[0];
        let inputs = StepInputs { load_pu: [0.05, 0.05], load_at_s: 0.0, ev_pu: 0.0, ev_at_s: 1e9 };
        let series = integrate::<f64, _>(&p, &inputs, 0.01, 30.0, 1).unwrap();
        assert!(series.iter().all(|s| s.state.ptie.abs() < 1e-14));
    }

    #[test]
    fn rk4_is_fourth_order_on_linear_decay() {
        let f = |_t: f64, y: &[f64; 2]| [y[1], -4.0 * y[0] - 0.5 * y[1]];
        let exact = |t: f64| {
            // y'' + 0.5 y' + 4 y = 0, y(0)=1, y'(0)=0
            let a = 0.25;
            let w = (4.0f64 - a * a).sqrt();
            (-a * t).exp() * ((w * t).cos() + a / w * (w * t).sin())
        };
        let err = |dt: f64| {
            let mut y = [1.0, 0.0];
            let n = (2.0 / dt).round() as usize;
            for k in 0..n {
                y = rk4_step(f, k as f64 * dt, &y, dt);
            }
            (y[0] - exact(2.0)).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((4.0..=64.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn halving_the_step_barely_moves_the_terminal_state() {
        let p = AgcParams::default();
        let inputs = StepInputs { load_pu: [0.125, 0.0], load_at_s: 1.0, ev_pu: 0.065, ev_at_s: 1.1 };
        let end = |dt: f64| integrate::<f64, _>(&p, &inputs, dt, 20.0, 1000).unwrap().last().unwrap().state.to_array();
        let (a, b) = (end(0.01), end(0.005));
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-6, "gap {gap:e}");
    }

    #[test]
    fn f32_integration_runs() {
        let p = AgcParams::default();
        let inputs = StepInputs { load_pu: [0.01, 0.0], load_at_s: 0.0, ev_pu: 0.0, ev_at_s: 0.0 };
        let s = integrate::<f32, _>(&p, &inputs, 0.01, 5.0, 100).unwrap();
        assert!(s.last().unwrap().state.df[0] < 0.0);
    }

    #[test]
    fn shortfall_and_net_imbalance() {
        let r = scenario_2200(&AgcParams::default(), 30_000.0, 50_000.0, 25_950.0).unwrap();
        assert!((r.shortfall_mw - 24.05).abs() < 1e-9);
        assert!((r.net_imbalance_mw - 4.05).abs() < 1e-9);
        assert!(scenario_2200(&AgcParams::default(), 20_000.0, 50_000.0, 25_950.0).is_err());
    }

    #[test]
    fn equilibrium_holds_for_a_long_run() {
        let p = AgcParams::default();
        let quiet = StepInputs { load_pu: [0.0; 2], load_at_s: 0.0, ev_pu: 0.0, ev_at_s: 0.0 };
        let s = integrate::<f64, _>(&p, &quiet, 0.01, 1000.0, 100_000).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].state, AgcState::zero());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn integral_control_restores_frequency_and_schedule(load in -0.02..0.02f64, area in 0usize..2) {
                prop_assume!(load.abs() > 1e-4);
                let p = AgcParams::default().unconstrained();
                let mut l = [0.0; 2];
                l[area] = load;
                let inputs = StepInputs { load_pu: l, load_at_s: 0.0, ev_pu: 0.0, ev_at_s: 1e9 };
                let s = integrate::<f64, _>(&p, &inputs, 0.02, 600.0, 1000).unwrap();
                let end = s.last().unwrap().state;
                prop_assert!(end.df.iter().all(|v| v.abs() < 1e-3 * load.abs()));
                prop_assert!(end.ptie.abs() < 1e-3 * load.abs());
                // The loaded area ends up carrying its own load.
                prop_assert!((end.pm[area] - load).abs() < 1e-3 * load.abs());
            }

            #[test]
            fn loaded_area_imports(load in 0.001..0.05f64) {
                let p = AgcParams::default().unconstrained();
                let inputs = StepInputs { load_pu: [load, 0.0], load_at_s: 0.0, ev_pu: 0.0, ev_at_s: 1e9 };
                let s = integrate::<f64, _>(&p, &inputs, 0.01, 2.0, 10).unwrap();
                prop_assert!(s.iter().all(|x| x.state.ptie <= 0.0));
                prop_assert!(s.iter().any(|x| x.state.ptie < 0.0));
            }
        }
    }
}
