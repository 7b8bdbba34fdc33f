//! Replicas of the compromised EVs and the per-period attack pipeline.

use super::{
    allowed_transitions, assign_targets, integerize_targets, map_to_measurements, plan_manipulation,
    transition_weights, AttackError, FabricationContext, Phi, PlannerConfig, TransitionWeights,
};
use crate::essm::{
    build_state_vector, build_transition_matrix, d_lower, d_upper, operational_block, ControlBroadcast, DriftModel,
    EvObservation, Norm, StateLayout, TransitionConfig,
};
use crate::fleet::{apply_broadcast, ev_rng, quantize_soc, Ev, Measurement, Mode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which reported bound the attacker inflates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlexTarget {
    #[default]
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub enabled: bool,
    pub start_h: f64,
    pub stop_h: Option<f64>,
    pub epsilon: f64,
    pub norm: Norm,
    pub horizon: usize,
    pub passes: usize,
    pub target: FlexTarget,
    /// Build the attacker's transition model from the whole fleet instead of
    /// the compromised subset.
    pub sees_clean_fleet: bool,
    /// Replicas react to operator broadcasts as the emulated EV would.
    pub follow_broadcasts: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start_h: 12.0,
            stop_h: None,
            epsilon: 0.01,
            norm: Norm::L1,
            horizon: 2,
            passes: 2,
            target: FlexTarget::Upper,
            sees_clean_fleet: false,
            follow_broadcasts: true,
        }
    }
}

impl AttackConfig {
    pub fn active_at(&self, now_h: f64) -> bool {
        self.enabled && now_h >= self.start_h - 1e-9 && self.stop_h.is_none_or(|s| now_h < s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub ev: Ev,
    /// Last report the operator received for this EV.
    pub last_report: Option<Measurement>,
}

impl Replica {
    fn natural(&self) -> (f64, f64) {
        (quantize_soc(self.ev.status.soc), self.ev.status.power_kw)
    }

    fn observation(&self) -> EvObservation {
        EvObservation {
            spec: self.ev.profile.spec,
            session: *self.ev.session().expect("replicas are connected"),
            soc: quantize_soc(self.ev.status.soc),
            power_kw: self.ev.status.power_kw,
            forced: self.ev.status.forced_charging,
            bounds: None,
            controlled: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackContext<'a> {
    pub layout: &'a StateLayout,
    pub step_h: f64,
    pub n_p: usize,
    pub now_h: f64,
    pub step: u64,
    pub drift: DriftModel,
}

impl AttackContext<'_> {
    fn period_h(&self) -> f64 {
        self.step_h * self.n_p as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttackOutcome {
    pub reports: Vec<Measurement>,
    pub objective: f64,
    /// Reports that differ from the replica's natural report.
    pub manipulated: usize,
    /// EVs that fell back to truthful reports after a stealth check failed.
    pub degraded: usize,
    /// The whole period fell back to truthful reports.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShadowFleet {
    pub replicas: BTreeMap<usize, Replica>,
}

impl ShadowFleet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicas.is_empty()
    }

    /// Keeps replicas of `present` EVs only and adds new ones, seeded from the
    /// EV's true state and the operator's last report of it.
    pub fn sync<'a>(&mut self, present: impl IntoIterator<Item = (&'a Ev, Option<Measurement>)>) {
        let mut next = BTreeMap::new();
        for (ev, last) in present {
            let id = ev.profile.id;
            let r = self.replicas.remove(&id).unwrap_or_else(|| Replica { ev: ev.clone(), last_report: last });
            next.insert(id, r);
        }
        self.replicas = next;
    }

    pub fn advance(&mut self, dt_h: f64) {
        for r in self.replicas.values_mut() {
            r.ev.advance(dt_h).expect("replica power within limits");
        }
    }

    pub fn refresh_forced(&mut self, now_h: f64) {
        for r in self.replicas.values_mut() {
            r.ev.refresh_forced(now_h);
        }
    }

    /// Applies a broadcast to the replicas using their own random stream.
    pub fn apply_broadcast(&mut self, layout: &StateLayout, b: &ControlBroadcast, seed: u64, step: u64) {
        for (id, r) in self.replicas.iter_mut() {
            let st = r.ev.status;
            let block = operational_block(layout, quantize_soc(st.soc), st.power_kw, st.forced_charging);
            let mut rng = ev_rng(seed, *id, step);
            r.ev.status = apply_broadcast(&st, &r.ev.profile.spec, block, b, &mut rng);
        }
    }

    /// One reporting period of the attack: plan, assign, fabricate and fold
    /// the fabricated reports back into the replicas.
    pub fn attack_step(&mut self, ctx: &AttackContext<'_>, cfg: &AttackConfig, clean: &[EvObservation]) -> AttackOutcome {
        if self.replicas.is_empty() {
            return AttackOutcome::default();
        }
        let plan = self.plan_reports(ctx, cfg, clean);
        let (targets, objective, fallback) = match plan {
            Ok((t, obj)) => (t, obj, false),
            Err(_) => (BTreeMap::new(), 0.0, true),
        };
        let mut out = AttackOutcome { objective, fallback, ..Default::default() };
        for (&id, r) in self.replicas.iter_mut() {
            let natural = r.natural();
            let (soc, power) = match (targets.get(&id), r.last_report) {
                (Some(&Ok(pair)), Some(_)) => pair,
                (Some(Err(_)), _) => {
                    out.degraded += 1;
                    natural
                }
                _ => natural,
            };
            if (soc, power) != natural {
                out.manipulated += 1;
                let mode = Mode::from_power(power);
                r.ev.status.soc = soc;
                r.ev.status.mode = mode;
                r.ev.status.power_kw = power;
                r.ev.status.forced_charging = false;
            }
            let m = Measurement { ev_id: id, soc, power_kw: power, step: ctx.step };
            r.last_report = Some(m);
            out.reports.push(m);
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn plan_reports(
        &self,
        ctx: &AttackContext<'_>,
        cfg: &AttackConfig,
        clean: &[EvObservation],
    ) -> Result<(BTreeMap<usize, Result<(f64, f64), AttackError>>, f64), AttackError> {
        let layout = ctx.layout;
        let ids: Vec<usize> = self.replicas.keys().copied().collect();
        let obs: Vec<EvObservation> = self.replicas.values().map(Replica::observation).collect();
        let labels: Vec<usize> = obs.iter().map(|o| o.label(layout)).collect();
        let x = build_state_vector::<f64>(layout, &labels);
        let tcfg = TransitionConfig { step_h: ctx.step_h, n_p: ctx.n_p, now_h: ctx.now_h, drift: ctx.drift };
        let a = if cfg.sees_clean_fleet {
            let all: Vec<EvObservation> = obs.iter().chain(clean).copied().collect();
            let all_labels: Vec<usize> = all.iter().map(|o| o.label(layout)).collect();
            build_transition_matrix(layout, &all, &build_state_vector(layout, &all_labels), &tcfg)
        } else {
            build_transition_matrix(layout, &obs, &x, &tcfg)
        };
        let w = match cfg.target {
            FlexTarget::Upper => d_upper::<f64>(layout.n_s),
            FlexTarget::Lower => d_lower::<f64>(layout.n_s),
        };
        let pcfg = PlannerConfig { horizon: cfg.horizon, n_p: ctx.n_p, epsilon: cfg.epsilon, norm: cfg.norm, passes: cfg.passes };

        // EVs the planner may move: operational and already reported once.
        let mut eligible: Vec<(usize, TransitionWeights)> = Vec::new();
        let mut fixed = vec![0usize; layout.operational()];
        for (k, r) in self.replicas.values().enumerate() {
            let o = &obs[k];
            match transition_weights(layout, o.soc, o.power_kw, o.forced) {
                Some(wts) if r.last_report.is_some() => eligible.push((k, wts)),
                _ => {
                    if labels[k] <= layout.operational() {
                        fixed[labels[k] - 1] += 1;
                    }
                }
            }
        }
        if eligible.is_empty() {
            return Ok((BTreeMap::new(), 0.0));
        }
        // Pools of identical weights hand out labels in position order (CM, IM,
        // then DM), so order by charging slack: EVs that can least afford to
        // lose charge come first.
        let slack = |k: usize| {
            let o = &obs[k];
            let need = (o.session.departure_soc - o.soc).max(0.0) * o.spec.capacity_kwh / (o.spec.efficiency * o.spec.charge_kw);
            o.session.finish_h - ctx.now_h - need
        };
        eligible.sort_by(|a, b| slack(a.0).total_cmp(&slack(b.0)).then(a.0.cmp(&b.0)));
        let weights: Vec<TransitionWeights> = eligible.iter().map(|e| e.1.clone()).collect();
        let n_total = ids.len() as f64;
        let mut natural = vec![0usize; layout.operational()];
        for (k, _) in &eligible {
            natural[labels[*k] - 1] += 1;
        }
        let within_budget = |counts: &[usize]| {
            let diff = counts.iter().zip(&natural).map(|(&c, &n)| c.abs_diff(n));
            match cfg.norm {
                Norm::L1 => diff.sum::<usize>() as f64 <= cfg.epsilon * n_total + 1e-9,
                Norm::LInf => diff.max().unwrap_or(0) as f64 <= cfg.epsilon * n_total + 1e-9,
            }
        };
        // Whole EVs can overshoot the continuous plan; shrink toward the natural
        // counts until the rounded shift fits the budget.
        let counts_for = |phi: &Phi| -> Result<(Vec<usize>, f64), AttackError> {
            let plan = plan_manipulation(&x.x, &a.a, &w, phi, &pcfg)?;
            let xp = plan.first().mul_vec(&x.x);
            let desired: Vec<f64> = (0..layout.operational()).map(|j| (n_total * xp[j] - fixed[j] as f64).max(0.0)).collect();
            let blend = |lambda: f64| {
                let d: Vec<f64> = desired.iter().zip(&natural).map(|(&d, &n)| n as f64 + lambda * (d - n as f64)).collect();
                integerize_targets(&d, eligible.len())
            };
            let full = blend(1.0);
            if within_budget(&full) {
                return Ok((full, plan.objective));
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if within_budget(&blend(mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok((blend(lo), plan.objective))
        };

        let phi = allowed_transitions(layout);
        let (mut counts, mut objective) = counts_for(&phi)?;
        let assigned = match assign_targets(&weights, &counts) {
            Ok(a) => a,
            Err(_) => {
                let mut tight = Phi::diagonal(layout.dim());
                for (k, wts) in &eligible {
                    let from = labels[*k] - 1;
                    for &(to, _) in &wts.support {
                        if phi.allows(from, to - 1) {
                            tight.set(from, to - 1, true);
                        }
                    }
                }
                (counts, objective) = counts_for(&tight)?;
                assign_targets(&weights, &counts)?
            }
        };

        let fabricate = |k: usize, target: usize| {
            let r = &self.replicas[&ids[k]];
            let fctx = FabricationContext {
                layout,
                spec: &r.ev.profile.spec,
                session: r.ev.session().expect("connected"),
                period_h: ctx.period_h(),
                now_h: ctx.now_h,
            };
            let prev = r.last_report.map_or(obs[k].soc, |m| m.soc);
            map_to_measurements(&fctx, target, r.natural(), prev)
        };
        let mut results: Vec<Result<(f64, f64), AttackError>> =
            eligible.iter().zip(&assigned).map(|((k, _), &t)| fabricate(*k, t)).collect();

        // One retry with the failing transitions removed.
        if results.iter().any(Result::is_err) {
            let mut retry = weights.clone();
            for (i, res) in results.iter().enumerate() {
                if res.is_err() {
                    retry[i].remove(assigned[i]);
                }
            }
            if let Ok(again) = assign_targets(&retry, &counts) {
                let second: Vec<Result<(f64, f64), AttackError>> =
                    eligible.iter().zip(&again).map(|((k, _), &t)| fabricate(*k, t)).collect();
                if second.iter().filter(|r| r.is_err()).count() < results.iter().filter(|r| r.is_err()).count() {
                    results = second;
                }
            }
        }
        let map = eligible.iter().zip(results).map(|((k, _), res)| (ids[*k], res)).collect();
        Ok((map, objective))
    }
}
