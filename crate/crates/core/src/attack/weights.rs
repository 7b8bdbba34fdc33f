//! Per-EV likelihood of each reachable state, used to pick which compromised
//! EVs carry the planned redistribution.

use crate::essm::{state_index, StateLayout};
use crate::fleet::Mode;

/// Softmax-normalized probabilities over an EV's supported states (1-based labels, ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionWeights {
    pub support: Vec<(usize, f64)>,
}

impl TransitionWeights {
    pub fn prob(&self, label: usize) -> f64 {
        self.support.iter().find(|(l, _)| *l == label).map_or(0.0, |p| p.1)
    }

    pub fn remove(&mut self, label: usize) {
        self.support.retain(|(l, _)| *l != label);
    }
}

pub const W_STAY: f64 = 0.8;

pub fn beta(layout: &StateLayout, block: usize) -> f64 {
    let r = block as f64 / layout.n_s as f64;
    0.8 * (1.0 - r * r)
}

pub fn beta_prime(layout: &StateLayout, block: usize) -> f64 {
    0.8 - beta(layout, block)
}

/// Weights for an EV reporting (`soc`, `power_kw`); `None` for special states.
pub fn transition_weights(layout: &StateLayout, soc: f64, power_kw: f64, forced: bool) -> Option<TransitionWeights> {
    let stay = state_index(layout, soc, power_kw, forced, true).ok()?;
    let (mode, block) = layout.decompose(stay)?;
    let loc = layout.block_position(soc);
    let n_s = layout.n_s;
    let mut raw: Vec<(usize, f64)> = vec![(stay, W_STAY)];
    let mut push = |target: Option<usize>, w: f64| {
        if let Some(t) = target {
            if w > 0.0 {
                raw.push((t, w));
            }
        }
    };
    let left = (block > 1).then(|| layout.label(mode, block - 1));
    let right = (block < n_s).then(|| layout.label(mode, block + 1));
    match mode {
        Mode::Charging => {
            push(Some(layout.label(Mode::Idle, block)), beta(layout, block));
            if loc <= 0.1 {
                push(left, 0.9);
            }
        }
        Mode::Idle => {
            push(Some(layout.label(Mode::Discharging, block)), beta(layout, block));
            if loc >= 0.9 {
                push(right, 0.2);
            }
            if loc <= 0.1 {
                push(left, 0.2);
            }
        }
        Mode::Discharging => {
            push(Some(layout.label(Mode::Idle, block)), beta_prime(layout, block));
            if loc >= 0.9 {
                push(right, 0.9);
            }
        }
    }
    let z: f64 = raw.iter().map(|(_, w)| w.exp()).sum();
    let mut support: Vec<(usize, f64)> = raw.into_iter().map(|(l, w)| (l, w.exp() / z)).collect();
    support.sort_by_key(|p| p.0);
    Some(TransitionWeights { support })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> StateLayout {
        StateLayout::new(10, 0.05, 0.95)
    }

    #[test]
    fn beta_values() {
        let l = layout();
        assert_eq!(beta(&l, 10), 0.0);
        assert!((beta(&l, 1) - 0.792).abs() < 1e-12);
        assert!((beta_prime(&l, 1) - 0.008).abs() < 1e-12);
    }

    #[test]
    fn idle_near_top_of_block() {
        let l = layout();
        // block 5 spans [0.41, 0.50); 0.4955 sits at 95% of it
        let w = transition_weights(&l, 0.4955, 0.0, false).unwrap();
        let b = beta(&l, 5);
        let z = 0.8f64.exp() + b.exp() + 0.2f64.exp();
        assert_eq!(w.support.len(), 3);
        assert!((w.prob(15) - 0.8f64.exp() / z).abs() < 1e-12);
        assert!((w.prob(25) - b.exp() / z).abs() < 1e-12);
        assert!((w.prob(16) - 0.2f64.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn top_block_has_no_mode_change_weight() {
        let w = transition_weights(&layout(), 0.90, -6.0, false).unwrap();
        assert_eq!(w.support, vec![(10, 1.0)]);
    }

    #[test]
    fn specials_are_skipped() {
        assert!(transition_weights(&layout(), 0.95, 0.0, false).is_none());
        assert!(transition_weights(&layout(), 0.5, -6.0, true).is_none());
    }
}
