//! Integer targets and the maximum-likelihood assignment of EVs to them.

use super::weights::TransitionWeights;
use super::AttackError;
use crate::optkit::{solve_transportation, TransportationProblem};
use std::collections::BTreeMap;

/// Largest-remainder apportionment of `total` over the proportions `x`;
/// equal remainders favour the lower index.
pub fn integerize_targets(x: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = x.iter().map(|v| v.max(0.0)).sum();
    let mut counts = vec![0usize; x.len()];
    if sum <= 0.0 || total == 0 {
        return counts;
    }
    let mut rem: Vec<(i64, usize)> = Vec::with_capacity(x.len());
    let mut assigned = 0;
    for (j, &v) in x.iter().enumerate() {
        let share = total as f64 * v.max(0.0) / sum;
        let fl = share.floor();
        counts[j] = fl as usize;
        assigned += counts[j];
        rem.push((((share - fl) * 1e9).round() as i64, j));
    }
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, j) in rem.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// Assigns each EV one target label (1-based) so that label `l` receives
/// `counts[l - 1]` EVs and the total log-likelihood is maximal. EVs with
/// identical weights are pooled; within a pool, lower positions take earlier labels.
pub fn assign_targets(weights: &[TransitionWeights], counts: &[usize]) -> Result<Vec<usize>, AttackError> {
    let demand_total: usize = counts.iter().sum();
    if demand_total != weights.len() {
        return Err(AttackError::Assignment(format!("{} EVs for {} target slots", weights.len(), demand_total)));
    }
    let mut pools: BTreeMap<Vec<(usize, u64)>, Vec<usize>> = BTreeMap::new();
    for (i, w) in weights.iter().enumerate() {
        let key: Vec<(usize, u64)> = w.support.iter().map(|&(l, p)| (l, p.to_bits())).collect();
        pools.entry(key).or_default().push(i);
    }
    let pools: Vec<(Vec<(usize, u64)>, Vec<usize>)> = pools.into_iter().collect();
    let cost: Vec<Vec<f64>> = pools
        .iter()
        .map(|(key, _)| {
            let mut row = vec![f64::INFINITY; counts.len()];
            for &(l, bits) in key {
                let p = f64::from_bits(bits);
                if p > 0.0 && l <= counts.len() {
                    row[l - 1] = -p.ln();
                }
            }
            row
        })
        .collect();
    let tp = TransportationProblem {
        cost,
        supply: pools.iter().map(|(_, m)| m.len() as u64).collect(),
        demand: counts.iter().map(|&c| c as u64).collect(),
    };
    let sol = solve_transportation(&tp).map_err(|e| AttackError::Assignment(e.to_string()))?;
    let mut out = vec![0usize; weights.len()];
    for (p, (_, members)) in pools.iter().enumerate() {
        let mut it = members.iter();
        for (col, &f) in sol.flow[p].iter().enumerate() {
            for _ in 0..f {
                out[*it.next().expect("flow equals pool size")] = col + 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(integerize_targets(&[0.25, 0.25, 0.5], 10), vec![3, 2, 5]);
        assert_eq!(integerize_targets(&[0.0, 1.0, 0.0], 7), vec![0, 7, 0]);
        assert_eq!(integerize_targets(&[0.1; 3], 2), vec![1, 1, 0]);
    }

    fn w(p: &[(usize, f64)]) -> TransitionWeights {
        TransitionWeights { support: p.to_vec() }
    }

    #[test]
    fn single_ev_stays() {
        let a = assign_targets(&[w(&[(1, 0.7), (2, 0.3)])], &[1, 0]).unwrap();
        assert_eq!(a, vec![1]);
    }

    #[test]
    fn two_ev_likelihood_example() {
        let a = assign_targets(&[w(&[(1, 0.9), (2, 0.1)]), w(&[(1, 0.5), (2, 0.5)])], &[1, 1]).unwrap();
        assert_eq!(a, vec![1, 2]);
    }

    #[test]
    fn unreachable_demand_is_an_error() {
        assert!(assign_targets(&[w(&[(1, 1.0)])], &[0, 1]).is_err());
        assert!(assign_targets(&[w(&[(1, 1.0)])], &[2, 0]).is_err());
    }

    mod props {
        use super::*;
        use crate::attack::transition_weights;
        use crate::essm::StateLayout;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn apportionment_is_within_one(x in prop::collection::vec(0.0..1.0f64, 1..40), total in 0usize..500) {
                let c = integerize_targets(&x, total);
                let sum: f64 = x.iter().sum();
                if sum > 0.0 {
                    prop_assert_eq!(c.iter().sum::<usize>(), total);
                    for (ci, xi) in c.iter().zip(&x) {
                        prop_assert!((*ci as f64 - total as f64 * xi / sum).abs() < 1.0 + 1e-9);
                    }
                }
            }

            #[test]
            fn assignment_meets_counts_and_beats_staying(
                evs in prop::collection::vec((5u32..95, 0u8..3, prop::sample::select(vec![0i32, -1, 1])), 1..40),
            ) {
                let l = StateLayout::new(10, 0.05, 0.95);
                let mut ws = Vec::new();
                let mut stay = Vec::new();
                for &(pct, m, shift) in &evs {
                    let Some(w) = transition_weights(&l, pct as f64 / 100.0, [-7.0, 0.0, 7.0][m as usize], false) else { continue };
                    // A demand mix that is feasible by construction: some EVs take another supported label.
                    let pick = (w.support.len() as i32 + shift).rem_euclid(w.support.len() as i32) as usize;
                    stay.push(w.support[pick].0);
                    ws.push(w);
                }
                prop_assume!(!ws.is_empty());
                let mut counts = vec![0usize; l.dim()];
                stay.iter().for_each(|&t| counts[t - 1] += 1);
                let got = assign_targets(&ws, &counts).unwrap();
                let mut seen = vec![0usize; l.dim()];
                got.iter().for_each(|&t| seen[t - 1] += 1);
                prop_assert_eq!(&seen, &counts);
                prop_assert!(got.iter().zip(&ws).all(|(&t, w)| w.prob(t) > 0.0));
                let ll = |a: &[usize]| a.iter().zip(&ws).map(|(&t, w)| w.prob(t).ln()).sum::<f64>();
                prop_assert!(ll(&got) >= ll(&stay) - 1e-9);
            }
        }
    }
}
