//! Turning an assigned target state into a concrete report.

use super::AttackError;
use crate::detector::feasible_pair;
use crate::essm::{state_index, StateLayout};
use crate::fleet::{forced_charging_required, quantize_steps, EvSession, EvSpec, SOC_STEPS};

#[derive(Debug, Clone, Copy)]
pub struct FabricationContext<'a> {
    pub layout: &'a StateLayout,
    pub spec: &'a EvSpec,
    pub session: &'a EvSession,
    pub period_h: f64,
    pub now_h: f64,
}

/// Label the operator will derive from a report, given it did not consider
/// the EV forced before.
pub fn operator_label(ctx: &FabricationContext<'_>, soc: f64, power_kw: f64) -> usize {
    let forced = power_kw < 0.0
        && ctx.now_h < ctx.session.finish_h
        && forced_charging_required(ctx.spec, ctx.session, soc, ctx.now_h);
    state_index(ctx.layout, soc, power_kw, forced, true).expect("connected")
}

fn steps_to_soc(steps: i64) -> f64 {
    steps as f64 / SOC_STEPS as f64
}

/// Report for `target` (1-based). `natural` is the un-manipulated report the
/// replica would send; `prev_soc` the last report the operator received.
pub fn map_to_measurements(
    ctx: &FabricationContext<'_>,
    target: usize,
    natural: (f64, f64),
    prev_soc: f64,
) -> Result<(f64, f64), AttackError> {
    let layout = ctx.layout;
    let natural_label = operator_label(ctx, natural.0, natural.1);
    if target == natural_label {
        return Ok(natural);
    }
    let (mode, block) = layout.decompose(target).ok_or(AttackError::Stealth { target })?;
    let (nat_mode, _) = layout.decompose(natural_label).ok_or(AttackError::Stealth { target })?;
    let power = ctx.spec.mode_power(mode);
    let candidate = if mode == nat_mode {
        natural.0
    } else {
        let prev = quantize_steps(prev_soc) as i64;
        let grid = 1.0 / SOC_STEPS as f64;
        let dsteps = (power.abs() * ctx.period_h / ctx.spec.capacity_kwh / grid - 1e-9).ceil() as i64;
        steps_to_soc(prev + mode.soc_direction() as i64 * dsteps)
    };
    // Clamp onto the target block and the SoC limits, on the reporting grid.
    let lo = quantize_steps(layout.block_lower(block)).max(quantize_steps(ctx.spec.soc_min)) as i64;
    let hi = if block < layout.n_s {
        quantize_steps(layout.block_lower(block + 1)) as i64 - 1
    } else {
        quantize_steps(ctx.spec.soc_max) as i64
    };
    let mut s = (quantize_steps(candidate) as i64).clamp(lo, hi);
    if operator_label(ctx, steps_to_soc(s), power) != target {
        // Limit values fall into a special state for idle reports.
        s = if s == hi { s - 1 } else { s + 1 };
    }
    let soc = steps_to_soc(s);
    if operator_label(ctx, soc, power) != target {
        return Err(AttackError::Stealth { target });
    }
    if !feasible_pair(prev_soc, soc, power, ctx.spec, ctx.period_h, 1.0 / SOC_STEPS as f64) {
        return Err(AttackError::Stealth { target });
    }
    Ok((soc, power))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (StateLayout, EvSpec, EvSession) {
        (
            StateLayout::new(10, 0.05, 0.95),
            EvSpec { capacity_kwh: 30.0, charge_kw: 6.0, discharge_kw: 6.0, efficiency: 0.9, soc_min: 0.05, soc_max: 0.95 },
            EvSession { start_h: 0.0, finish_h: 100.0, start_soc: 0.2, departure_soc: 0.85 },
        )
    }

    #[test]
    fn mapping_examples() {
        let (l, spec, session) = setup();
        let ctx = FabricationContext { layout: &l, spec: &spec, session: &session, period_h: 1.0 / 12.0, now_h: 0.0 };
        assert_eq!(map_to_measurements(&ctx, 15, (0.45, 0.0), 0.45).unwrap(), (0.45, 0.0));
        // IM -> CM at 0.50 (block 6): two grid points up
        assert_eq!(map_to_measurements(&ctx, 6, (0.50, 0.0), 0.50).unwrap(), (0.52, -6.0));
        // CM -> IM keeps the previous report
        assert_eq!(map_to_measurements(&ctx, 15, (0.46, -6.0), 0.44).unwrap(), (0.44, 0.0));
        // IM -> DM at 0.42 clamps to the block floor 0.41
        assert_eq!(map_to_measurements(&ctx, 25, (0.42, 0.0), 0.42).unwrap(), (0.41, 6.0));
    }

    #[test]
    fn infeasible_jump_is_refused() {
        let (l, spec, session) = setup();
        let ctx = FabricationContext { layout: &l, spec: &spec, session: &session, period_h: 1.0 / 12.0, now_h: 0.0 };
        // DM target two blocks above the previous report
        assert!(matches!(map_to_measurements(&ctx, 27, (0.60, 0.0), 0.45), Err(AttackError::Stealth { .. })));
    }
}
