//! Exhaustive reference solvers. Exponential; only for small test instances.

use super::{LinearProgram, TransportationProblem};
use crate::scalar::Scalar;

/// Best objective over every basic solution of a bounded LP.
///
/// Each candidate fixes `n − m` variables at one of their bounds and solves the
/// remaining square system by Gaussian elimination. Returns `None` when no
/// candidate is feasible. All upper bounds must be finite.
pub fn lp_vertex_enumeration<T: Scalar>(lp: &LinearProgram<T>, feas_tol: T) -> Option<(Vec<T>, T)> {
    let n = lp.num_vars();
    let m = lp.a_eq.len();
    assert!(m <= n, "more equalities than variables");
    assert!(lp.upper.iter().all(|u| u.is_finite()), "oracle needs finite bounds");
    let mut best: Option<(Vec<T>, T)> = None;
    for basic in combinations(n, m) {
        let nonbasic: Vec<usize> = (0..n).filter(|j| !basic.contains(j)).collect();
        for mask in 0..(1usize << nonbasic.len()) {
            let mut x = vec![T::zero(); n];
            for (k, &j) in nonbasic.iter().enumerate() {
                x[j] = if mask >> k & 1 == 1 { lp.upper[j] } else { lp.lower[j] };
            }
            let mut a: Vec<Vec<T>> = Vec::with_capacity(m);
            for (row, &b) in lp.a_eq.iter().zip(&lp.b_eq) {
                let fixed = nonbasic.iter().fold(T::zero(), |acc, &j| acc + row[j] * x[j]);
                let mut r: Vec<T> = basic.iter().map(|&j| row[j]).collect();
                r.push(b - fixed);
                a.push(r);
            }
            let Some(sol) = gauss_solve(a) else { continue };
            for (k, &j) in basic.iter().enumerate() {
                x[j] = sol[k];
            }
            if lp.max_residual(&x) > feas_tol {
                continue;
            }
            let obj = lp.objective.iter().zip(&x).fold(T::zero(), |acc, (&c, &v)| acc + c * v);
            if best.as_ref().is_none_or(|(_, b)| obj > *b) {
                best = Some((x, obj));
            }
        }
    }
    best
}

fn gauss_solve<T: Scalar>(mut a: Vec<Vec<T>>) -> Option<Vec<T>> {
    let m = a.len();
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[piv][col].abs() < T::lit(1e-12) {
            return None;
        }
        a.swap(col, piv);
        for i in 0..m {
            if i != col {
                let f = a[i][col] / a[col][col];
                for k in col..=m {
                    let v = a[col][k];
                    a[i][k] = a[i][k] - f * v;
                }
            }
        }
    }
    Some((0..m).map(|i| a[i][m] / a[i][i]).collect())
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Minimum cost over every assignment of unit-supply rows to columns whose
/// column counts equal `demand`. Returns the per-row column choice and the cost.
pub fn exhaustive_assignment<T: Scalar>(tp: &TransportationProblem<T>) -> Option<(Vec<usize>, T)> {
    assert!(tp.supply.iter().all(|&s| s == 1), "oracle expects unit supplies");
    let rows = tp.supply.len();
    let cols = tp.demand.len();
    let mut remaining = tp.demand.clone();
    let mut choice = vec![0usize; rows];
    let mut best: Option<(Vec<usize>, T)> = None;
    fn rec<T: Scalar>(
        i: usize,
        tp: &TransportationProblem<T>,
        cols: usize,
        remaining: &mut [u64],
        choice: &mut [usize],
        best: &mut Option<(Vec<usize>, T)>,
    ) {
        if i == choice.len() {
            let cost = choice
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (r, &c)| acc + tp.cost[r][c]);
            if best.as_ref().is_none_or(|(_, b)| cost < *b) {
                *best = Some((choice.to_vec(), cost));
            }
            return;
        }
        for j in 0..cols {
            if remaining[j] > 0 && tp.cost[i][j].is_finite() {
                remaining[j] -= 1;
                choice[i] = j;
                rec(i + 1, tp, cols, remaining, choice, best);
                remaining[j] += 1;
            }
        }
    }
    rec(0, tp, cols, &mut remaining, &mut choice, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertex_enumeration_on_box() {
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.upper = vec![1.0, 1.0];
        let (x, obj) = lp_vertex_enumeration(&lp, 1e-9).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        assert_eq!(obj, 3.0);
    }

    #[test]
    fn exhaustive_assignment_two_by_two() {
        let tp = TransportationProblem {
            cost: vec![vec![1.0, 9.0], vec![9.0, 1.0]],
            supply: vec![1, 1],
            demand: vec![1, 1],
        };
        let (choice, cost) = exhaustive_assignment(&tp).unwrap();
        assert_eq!(choice, vec![0, 1]);
        assert_eq!(cost, 2.0);
    }
}
