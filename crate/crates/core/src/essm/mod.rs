//! The operator's aggregate model: state indexing, state vector, Markov
//! transition matrix, flexibility report, feedback synthesis and broadcast.

mod transition;

pub use transition::{
    build_transition_matrix, build_weighted_transition_matrix, forecast_label, soc_interval, track_soc_bounds, p_ave, DriftModel, EvObservation, TransitionConfig,
};

use crate::fleet::Mode;
use crate::scalar::{Dense, Scalar};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EssmError {
    #[error("EV is not connected and has no state index")]
    NotIndexable,
    #[error("no connected EVs: the average charging power is undefined")]
    EmptyFleet,
    #[error("feedback drives state {index} negative ({value:e})")]
    FeedbackInfeasible { index: usize, value: f64 },
    #[error("feedback mixes switching directions")]
    MixedDirection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Layout of the 3N_s+3 state space. Labels are 1-based, as in the model's
/// own numbering; vectors are stored 0-based (`label - 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLayout {
    pub n_s: usize,
    pub soc_min: f64,
    pub soc_max: f64,
}

impl StateLayout {
    pub fn new(n_s: usize, soc_min: f64, soc_max: f64) -> Self {
        assert!(n_s > 0 && soc_min < soc_max);
        Self { n_s, soc_min, soc_max }
    }

    pub fn dim(&self) -> usize {
        3 * self.n_s + 3
    }

    pub fn operational(&self) -> usize {
        3 * self.n_s
    }

    pub fn ss_max(&self) -> usize {
        3 * self.n_s + 1
    }

    pub fn fcs(&self) -> usize {
        3 * self.n_s + 2
    }

    pub fn ss_min(&self) -> usize {
        3 * self.n_s + 3
    }

    pub fn width(&self) -> f64 {
        (self.soc_max - self.soc_min) / self.n_s as f64
    }

    /// SoC block 1..=N_s.
    pub fn block(&self, soc: f64) -> usize {
        let rel = (soc - self.soc_min) / self.width();
        let j = (rel + 1e-9).floor().max(0.0) as usize + 1;
        j.min(self.n_s)
    }

    pub fn block_lower(&self, block: usize) -> f64 {
        self.soc_min + (block - 1) as f64 * self.width()
    }

    /// Fractional position of `soc` inside its block.
    pub fn block_position(&self, soc: f64) -> f64 {
        let b = self.block(soc);
        ((soc - self.block_lower(b)) / self.width()).clamp(0.0, 1.0)
    }

    pub fn label(&self, mode: Mode, block: usize) -> usize {
        mode.block() * self.n_s + block
    }

    /// Inverse of `label` for operational labels.
    pub fn decompose(&self, label: usize) -> Option<(Mode, usize)> {
        if label == 0 || label > self.operational() {
            return None;
        }
        let mode = match (label - 1) / self.n_s {
            0 => Mode::Charging,
            1 => Mode::Idle,
            _ => Mode::Discharging,
        };
        Some((mode, (label - 1) % self.n_s + 1))
    }
}

/// State label of a connected EV from its (reported) SoC, power and forced flag.
pub fn state_index(
    layout: &StateLayout,
    soc: f64,
    power_kw: f64,
    forced: bool,
    connected: bool,
) -> Result<usize, EssmError> {
    if !connected {
        return Err(EssmError::NotIndexable);
    }
    if forced {
        return Ok(layout.fcs());
    }
    let mode = Mode::from_power(power_kw);
    if mode == Mode::Idle && soc >= layout.soc_max - 1e-9 {
        return Ok(layout.ss_max());
    }
    if mode == Mode::Idle && soc <= layout.soc_min + 1e-9 {
        return Ok(layout.ss_min());
    }
    Ok(layout.label(mode, layout.block(soc)))
}

/// SoC block an EV reacts to broadcasts with, or `None` in a special state.
pub fn operational_block(layout: &StateLayout, soc: f64, power_kw: f64, forced: bool) -> Option<usize> {
    let label = state_index(layout, soc, power_kw, forced, true).ok()?;
    layout.decompose(label).map(|(_, b)| b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T> {
    pub x: Vec<T>,
    pub n_s: usize,
}

impl<T: Scalar> StateVector<T> {
    pub fn zeros(n_s: usize) -> Self {
        Self { x: vec![T::zero(); 3 * n_s + 3], n_s }
    }

    pub fn at(&self, label: usize) -> T {
        self.x[label - 1]
    }

    pub fn total(&self) -> T {
        self.x.iter().copied().sum()
    }

    pub fn is_distribution(&self, tol: T) -> bool {
        self.x.iter().all(|&v| v >= -tol) && (self.total() - T::one()).abs() <= tol
    }

    pub fn distance(&self, other: &Self, norm: Norm) -> T {
        let diffs = self.x.iter().zip(&other.x).map(|(&a, &b)| (a - b).abs());
        match norm {
            Norm::L1 => diffs.sum(),
            Norm::LInf => diffs.fold(T::zero(), T::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L1,
    LInf,
}

/// Fraction of EVs per label. An empty population yields the all-zero vector.
pub fn build_state_vector<T: Scalar>(layout: &StateLayout, labels: &[usize]) -> StateVector<T> {
    let mut counts = vec![0usize; layout.dim()];
    for &l in labels {
        counts[l - 1] += 1;
    }
    let mut v = StateVector::zeros(layout.n_s);
    if labels.is_empty() {
        return v;
    }
    let n = T::from_usize_lossy(labels.len());
    for (slot, c) in v.x.iter_mut().zip(counts) {
        *slot = T::from_usize_lossy(c) / n;
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    pub a: Dense<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn identity(dim: usize) -> Self {
        Self { a: Dense::identity(dim) }
    }

    pub fn apply(&self, x: &StateVector<T>) -> StateVector<T> {
        StateVector { x: self.a.mul_vec(&x.x), n_s: x.n_s }
    }

    pub fn power(&self, n: usize) -> Dense<T> {
        self.a.pow(n)
    }

    pub fn is_column_stochastic(&self, tol: T) -> bool {
        let n = self.a.rows();
        (0..n).all(|i| (0..n).all(|j| self.a[(i, j)] >= -tol))
            && self.a.column_sums().iter().all(|&s| (s - T::one()).abs() <= tol)
    }
}

fn vector_d<T: Scalar>(n_s: usize, op: [f64; 3], special: [f64; 3]) -> Vec<T> {
    let mut d = Vec::with_capacity(3 * n_s + 3);
    for v in op {
        d.extend(std::iter::repeat_n(T::lit(v), n_s));
    }
    d.extend(special.iter().map(|&v| T::lit(v)));
    d
}

/// Power direction of each state.
pub fn d_power<T: Scalar>(n_s: usize) -> Vec<T> {
    vector_d(n_s, [-1.0, 0.0, 1.0], [0.0, -1.0, 0.0])
}

pub fn d_upper<T: Scalar>(n_s: usize) -> Vec<T> {
    vector_d(n_s, [0.0, 1.0, 2.0], [0.0, 0.0, 2.0])
}

pub fn d_lower<T: Scalar>(n_s: usize) -> Vec<T> {
    vector_d(n_s, [2.0, 1.0, 0.0], [2.0, 0.0, 0.0])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexibilityReport<T> {
    pub y: T,
    pub y_u: T,
    pub y_l: T,
    pub p_ave: T,
    pub n_connected: usize,
}

/// Aggregate injection in kW (positive = into the grid).
pub fn aggregated_power<T: Scalar>(x: &StateVector<T>, p_ave: T, n: usize) -> T {
    p_ave * T::from_usize_lossy(n) * crate::scalar::dot(&d_power(x.n_s), &x.x)
}

pub fn flexibility_bounds<T: Scalar>(x: &StateVector<T>, p_ave: T, n: usize) -> (T, T) {
    let scale = p_ave * T::from_usize_lossy(n);
    (
        scale * crate::scalar::dot(&d_upper(x.n_s), &x.x),
        scale * crate::scalar::dot(&d_lower(x.n_s), &x.x),
    )
}

pub fn flexibility_report<T: Scalar>(x: &StateVector<T>, p_ave: T, n: usize) -> FlexibilityReport<T> {
    let (y_u, y_l) = flexibility_bounds(x, p_ave, n);
    FlexibilityReport {
        y: aggregated_power(x, p_ave, n),
        y_u,
        y_l,
        p_ave,
        n_connected: n,
    }
}

/// Block mass shifts: `u[j] > 0` moves CM → IM, `v[j] > 0` moves IM → DM.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSignal<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    /// The request could not be met with the mass available.
    pub saturated: bool,
}

impl<T: Scalar> FeedbackSignal<T> {
    pub fn zero(n_s: usize) -> Self {
        Self { u: vec![T::zero(); n_s], v: vec![T::zero(); n_s], saturated: false }
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_zero())
    }
}

/// x' = A x + B u + C v, with tiny negative round-off clipped.
pub fn predict<T: Scalar>(
    x: &StateVector<T>,
    a: &TransitionMatrix<T>,
    fb: &FeedbackSignal<T>,
) -> Result<StateVector<T>, EssmError> {
    let n_s = x.n_s;
    let mut next = a.apply(x);
    for j in 0..n_s {
        next.x[j] = next.x[j] - fb.u[j];
        next.x[n_s + j] = next.x[n_s + j] + fb.u[j] - fb.v[j];
        next.x[2 * n_s + j] = next.x[2 * n_s + j] + fb.v[j];
    }
    let tol = T::lit(1e-9);
    let mut clipped = false;
    for (i, v) in next.x.iter_mut().enumerate() {
        if *v < T::zero() {
            if *v < -tol {
                return Err(EssmError::FeedbackInfeasible { index: i + 1, value: v.to_f64().unwrap_or(f64::NAN) });
            }
            *v = T::zero();
            clipped = true;
        }
    }
    if clipped {
        let total = next.total();
        if total > T::zero() {
            for v in next.x.iter_mut() {
                *v = *v / total;
            }
        }
    }
    Ok(next)
}

/// Greedy allocation of the mass shift needed to move the aggregate power
/// from `y` toward `target`. Raising injection takes CM→IM from the top CM
/// block down, then IM→DM from the top IM block down; lowering injection
/// takes DM→IM from the bottom DM block up, then IM→CM from the bottom IM block up.
pub fn make_feedback<T: Scalar>(x: &StateVector<T>, y: T, target: T, p_ave: T, n: usize) -> FeedbackSignal<T> {
    let n_s = x.n_s;
    let mut fb = FeedbackSignal::zero(n_s);
    let scale = p_ave * T::from_usize_lossy(n);
    if scale <= T::zero() {
        fb.saturated = !(target - y).is_zero();
        return fb;
    }
    let mut need = (target - y).abs() / scale;
    let raise = target > y;
    let cm = &x.x[..n_s];
    let im = &x.x[n_s..2 * n_s];
    let dm = &x.x[2 * n_s..3 * n_s];
    let mut take = |avail: T, slot: &mut T, sign: T| {
        if need <= T::zero() {
            return;
        }
        let m = avail.min(need).max(T::zero());
        *slot = sign * m;
        need = need - m;
    };
    if raise {
        for j in (0..n_s).rev() {
            take(cm[j], &mut fb.u[j], T::one());
        }
        for j in (0..n_s).rev() {
            // Mass moved into IM this step is not yet available to move on.
            take(im[j], &mut fb.v[j], T::one());
        }
    } else {
        for j in 0..n_s {
            take(dm[j], &mut fb.v[j], -T::one());
        }
        for j in 0..n_s {
            take(im[j], &mut fb.u[j], -T::one());
        }
    }
    fb.saturated = need > T::tolerance();
    fb
}

/// Probability vectors plus the control direction element.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControlBroadcast {
    pub u_s: Vec<f64>,
    pub v_s: Vec<f64>,
    pub cde: i8,
}

impl ControlBroadcast {
    pub fn idle(n_s: usize) -> Self {
        Self { u_s: vec![0.0; n_s], v_s: vec![0.0; n_s], cde: 1 }
    }
}

/// Converts block mass shifts into per-EV switching probabilities.
pub fn to_broadcast<T: Scalar>(fb: &FeedbackSignal<T>, x: &StateVector<T>) -> Result<ControlBroadcast, EssmError> {
    let n_s = x.n_s;
    let pos = fb.u.iter().chain(&fb.v).any(|&v| v > T::zero());
    let neg = fb.u.iter().chain(&fb.v).any(|&v| v < T::zero());
    if pos && neg {
        return Err(EssmError::MixedDirection);
    }
    let cde: i8 = if neg { -1 } else { 1 };
    let ratio = |mass: T, occ: T| -> f64 {
        if occ <= T::zero() || mass.is_zero() {
            0.0
        } else {
            (mass.abs() / occ).to_f64().unwrap_or(0.0).clamp(0.0, 1.0)
        }
    };
    let mut b = ControlBroadcast::idle(n_s);
    b.cde = cde;
    for j in 0..n_s {
        // Source blocks: CM for u>0, IM for u<0, IM for v>0, DM for v<0.
        let (u_src, v_src) = if cde > 0 {
            (x.x[j], x.x[n_s + j])
        } else {
            (x.x[n_s + j], x.x[2 * n_s + j])
        };
        b.u_s[j] = ratio(fb.u[j], u_src);
        b.v_s[j] = ratio(fb.v[j], v_src);
    }
    Ok(b)
}
