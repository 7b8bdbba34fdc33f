//! Dense two-phase primal simplex with Bland's anti-cycling rule.

use super::OptError;
use crate::scalar::{Dense, Scalar};

/// `maximize cᵀx  s.t.  A x = b,  lower ≤ x ≤ upper`.
///
/// Lower bounds must be finite; upper bounds may be `+∞`.
#[derive(Debug, Clone)]
pub struct LinearProgram<T> {
    pub objective: Vec<T>,
    pub a_eq: Vec<Vec<T>>,
    pub b_eq: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<T> {
    pub x: Vec<T>,
    pub objective: T,
}

impl<T: Scalar> LinearProgram<T> {
    /// Empty program over `n` variables bounded to `[0, +∞)`.
    pub fn new(objective: Vec<T>) -> Self {
        let n = objective.len();
        Self {
            objective,
            a_eq: Vec::new(),
            b_eq: Vec::new(),
            lower: vec![T::zero(); n],
            upper: vec![T::infinity(); n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_eq(&mut self, row: Vec<T>, rhs: T) {
        assert_eq!(row.len(), self.num_vars());
        self.a_eq.push(row);
        self.b_eq.push(rhs);
    }

    /// Appends a fresh nonnegative slack variable and records `row·x + s = rhs`.
    /// Every existing equality row gets a zero coefficient for the slack.
    pub fn add_le(&mut self, mut row: Vec<T>, rhs: T) -> usize {
        let slack = self.num_vars();
        self.objective.push(T::zero());
        self.lower.push(T::zero());
        self.upper.push(T::infinity());
        for r in &mut self.a_eq {
            r.push(T::zero());
        }
        row.resize(slack, T::zero());
        row.push(T::one());
        self.a_eq.push(row);
        self.b_eq.push(rhs);
        slack
    }

    fn validate(&self) -> Result<(), OptError> {
        let n = self.num_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(OptError::Malformed("bound vectors must match variable count".into()));
        }
        if self.a_eq.len() != self.b_eq.len() || self.a_eq.iter().any(|r| r.len() != n) {
            return Err(OptError::Malformed("constraint matrix shape mismatch".into()));
        }
        let finite = |v: &T| v.is_finite();
        if !self.objective.iter().all(finite)
            || !self.b_eq.iter().all(finite)
            || !self.a_eq.iter().flatten().all(finite)
        {
            return Err(OptError::Malformed("non-finite coefficient".into()));
        }
        for (i, (&l, &u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !l.is_finite() || u.is_nan() || l > u {
                return Err(OptError::Malformed(format!("bad bounds on variable {i}")));
            }
        }
        Ok(())
    }

    /// Largest absolute residual of `A x = b` and the bounds at `x`.
    pub fn max_residual(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for (row, &b) in self.a_eq.iter().zip(&self.b_eq) {
            let lhs = row.iter().zip(x).fold(T::zero(), |acc, (&a, &v)| acc + a * v);
            worst = worst.max((lhs - b).abs());
        }
        for ((&v, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(l - v).max(v - u);
        }
        worst
    }
}

struct Tableau<T> {
    t: Dense<T>,
    rhs: Vec<T>,
    basis: Vec<usize>,
    /// Columns that may never enter (retired artificials).
    blocked: Vec<bool>,
    pivot_tol: T,
    cost_tol: T,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl<T: Scalar> Tableau<T> {
    fn reduced_costs(&self, c: &[T]) -> Vec<T> {
        let mut d = c.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = c[b];
            if cb == T::zero() {
                continue;
            }
            for (dj, &a) in d.iter_mut().zip(self.t.row(i)) {
                *dj = *dj - cb * a;
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, col: usize, d: &mut [T]) {
        let ncols = self.t.cols();
        let p = self.t[(r, col)];
        for j in 0..ncols {
            self.t[(r, j)] = self.t[(r, j)] / p;
        }
        self.rhs[r] = self.rhs[r] / p;
        for i in 0..self.t.rows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, col)];
            if f == T::zero() {
                continue;
            }
            for j in 0..ncols {
                let v = self.t[(r, j)];
                if v != T::zero() {
                    self.t[(i, j)] = self.t[(i, j)] - f * v;
                }
            }
            self.t[(i, col)] = T::zero();
            self.rhs[i] = self.rhs[i] - f * self.rhs[r];
            if self.rhs[i] < T::zero() && self.rhs[i] > -self.pivot_tol {
                self.rhs[i] = T::zero();
            }
        }
        let f = d[col];
        if f != T::zero() {
            for j in 0..ncols {
                d[j] = d[j] - f * self.t[(r, j)];
            }
            d[col] = T::zero();
        }
        self.basis[r] = col;
    }

    /// Primal simplex on the current basis; `d` holds reduced costs for `c`.
    fn run(&mut self, c: &[T]) -> Outcome {
        let mut d = self.reduced_costs(c);
        loop {
            // Bland: lowest-index improving column.
            let entering = (0..d.len()).find(|&j| !self.blocked[j] && d[j] > self.cost_tol);
            let Some(col) = entering else {
                return Outcome::Optimal;
            };
            let mut best: Option<(usize, T)> = None;
            for i in 0..self.t.rows() {
                let a = self.t[(i, col)];
                if a > self.pivot_tol {
                    let ratio = self.rhs[i] / a;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            let tie = (ratio - br).abs() <= self.pivot_tol;
                            if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = best else {
                return Outcome::Unbounded;
            };
            self.pivot(row, col, &mut d);
        }
    }

    fn remove_row(&mut self, r: usize) {
        let rows: Vec<Vec<T>> = (0..self.t.rows())
            .filter(|&i| i != r)
            .map(|i| self.t.row(i).to_vec())
            .collect();
        let cols = self.t.cols();
        self.t = if rows.is_empty() {
            Dense::zeros(0, cols)
        } else {
            Dense::from_rows(&rows)
        };
        self.rhs.remove(r);
        self.basis.remove(r);
    }
}

/// Solves `lp` to a vertex optimum.
pub fn solve_lp<T: Scalar>(lp: &LinearProgram<T>) -> Result<LpSolution<T>, OptError> {
    lp.validate()?;
    let n = lp.num_vars();
    let tol = T::tolerance();

    // Shift to y = x − lower ≥ 0 and turn finite upper bounds into rows with slacks.
    let bounded: Vec<usize> = (0..n).filter(|&i| lp.upper[i].is_finite()).collect();
    let m_eq = lp.a_eq.len();
    let m = m_eq + bounded.len();
    let n_struct = n + bounded.len();
    let n_art = m_eq;
    let ncols = n_struct + n_art;

    let mut t = Dense::zeros(m, ncols);
    let mut rhs = vec![T::zero(); m];
    let mut basis = vec![0usize; m];
    for (i, row) in lp.a_eq.iter().enumerate() {
        let shift = row
            .iter()
            .zip(&lp.lower)
            .fold(T::zero(), |acc, (&a, &l)| acc + a * l);
        let mut b = lp.b_eq[i] - shift;
        let sign = if b < T::zero() { -T::one() } else { T::one() };
        b = b * sign;
        for (j, &a) in row.iter().enumerate() {
            t[(i, j)] = a * sign;
        }
        t[(i, n_struct + i)] = T::one();
        rhs[i] = b;
        basis[i] = n_struct + i;
    }
    for (k, &var) in bounded.iter().enumerate() {
        let i = m_eq + k;
        t[(i, var)] = T::one();
        t[(i, n + k)] = T::one();
        rhs[i] = lp.upper[var] - lp.lower[var];
        basis[i] = n + k;
    }

    let scale = rhs.iter().fold(T::one(), |acc, &v| acc.max(v.abs()));
    let mut tab = Tableau {
        t,
        rhs,
        basis,
        blocked: vec![false; ncols],
        pivot_tol: tol * T::lit(100.0),
        cost_tol: tol * T::lit(10.0),
    };

    // Phase one: drive artificials to zero.
    if n_art > 0 {
        let mut c1 = vec![T::zero(); ncols];
        for c in c1.iter_mut().skip(n_struct) {
            *c = -T::one();
        }
        if let Outcome::Unbounded = tab.run(&c1) {
            return Err(OptError::Malformed("phase one reported unbounded".into()));
        }
        let infeas: T = tab
            .basis
            .iter()
            .zip(&tab.rhs)
            .filter(|(&b, _)| b >= n_struct)
            .map(|(_, &v)| v)
            .sum();
        if infeas > tab.pivot_tol * scale * T::lit(10.0) {
            return Err(OptError::Infeasible {
                residual: infeas.to_f64().unwrap_or(f64::NAN),
            });
        }
        // Pivot remaining (degenerate) artificials out, dropping redundant rows.
        let mut r = 0;
        while r < tab.basis.len() {
            if tab.basis[r] >= n_struct {
                let col = (0..n_struct).find(|&j| tab.t[(r, j)].abs() > tab.pivot_tol);
                match col {
                    Some(j) => {
                        let mut dummy = vec![T::zero(); ncols];
                        tab.pivot(r, j, &mut dummy);
                        r += 1;
                    }
                    None => tab.remove_row(r),
                }
            } else {
                r += 1;
            }
        }
        for b in tab.blocked.iter_mut().skip(n_struct) {
            *b = true;
        }
    }

    let mut c2 = vec![T::zero(); ncols];
    c2[..n].copy_from_slice(&lp.objective);
    if let Outcome::Unbounded = tab.run(&c2) {
        return Err(OptError::Unbounded);
    }

    let mut x = lp.lower.clone();
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] = x[b] + tab.rhs[i];
        }
    }
    let objective = lp
        .objective
        .iter()
        .zip(&x)
        .fold(T::zero(), |acc, (&c, &v)| acc + c * v);
    Ok(LpSolution { x, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variable_upper_bound() {
        let mut lp = LinearProgram::<f64>::new(vec![1.0]);
        lp.upper[0] = 3.0;
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_optimum_on_simplex() {
        let mut lp = LinearProgram::<f64>::new(vec![1.0, 1.0]);
        lp.upper = vec![1.0, 1.0];
        lp.add_eq(vec![1.0, 1.0], 1.0);
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert!(lp.max_residual(&sol.x) < 1e-12);
    }

    #[test]
    fn infeasible_is_reported() {
        let mut lp = LinearProgram::new(vec![1.0, 0.0]);
        lp.upper = vec![1.0, 1.0];
        lp.add_eq(vec![1.0, 1.0], 5.0);
        assert!(matches!(solve_lp(&lp), Err(OptError::Infeasible { .. })));
    }

    #[test]
    fn unbounded_is_reported() {
        let mut lp = LinearProgram::new(vec![1.0, 0.0]);
        lp.add_eq(vec![1.0, -1.0], 0.0);
        assert!(matches!(solve_lp(&lp), Err(OptError::Unbounded)));
    }

    #[test]
    fn slack_rows_and_negative_rhs() {
        // max 3x + 2y  s.t. x + y ≤ 4, x + 3y ≤ 6, x ≤ 3, and x − y = −1 (negative rhs row)
        let mut lp = LinearProgram::<f64>::new(vec![3.0, 2.0]);
        lp.upper[0] = 3.0;
        lp.add_eq(vec![1.0, -1.0], -1.0);
        lp.add_le(vec![1.0, 1.0], 4.0);
        lp.add_le(vec![1.0, 3.0], 6.0);
        let sol = solve_lp(&lp).unwrap();
        // x − y = −1 and x + 3y ≤ 6 → y ≤ 7/4, x = 3/4
        assert!((sol.x[0] - 0.75).abs() < 1e-10);
        assert!((sol.x[1] - 1.75).abs() < 1e-10);
        assert!((sol.objective - 5.75).abs() < 1e-10);
    }

    #[test]
    fn works_in_single_precision() {
        let mut lp = LinearProgram::<f32>::new(vec![2.0, 1.0]);
        lp.upper = vec![1.0, 1.0];
        lp.add_le(vec![1.0, 1.0], 1.5);
        let sol = solve_lp(&lp).unwrap();
        assert!((sol.objective - 2.5).abs() < 1e-5);
    }

    #[test]
    fn nonzero_lower_bounds_are_shifted() {
        let mut lp = LinearProgram::new(vec![-1.0, -1.0]);
        lp.lower = vec![1.0, 2.0];
        lp.upper = vec![5.0, 5.0];
        lp.add_le(vec![1.0, 1.0], 10.0);
        let sol = solve_lp(&lp).unwrap();
        assert_eq!(sol.x[..2], [1.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// A box-bounded program with equalities built around a known feasible
        /// point. Coarse integer data and a point on the box corners make
        /// degenerate bases common.
        fn arb_lp() -> impl Strategy<Value = (LinearProgram<f64>, Vec<f64>)> {
            (2usize..7, 0usize..4).prop_flat_map(|(n, m)| {
                (
                    prop::collection::vec(-3i32..=3, n),
                    prop::collection::vec(prop::collection::vec(-2i32..=2, n), m.min(n)),
                    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..1.0f64], n),
                    prop::collection::vec(1u8..4, n),
                )
                    .prop_map(|(c, rows, t, ub)| {
                        let upper: Vec<f64> = ub.iter().map(|&u| u as f64).collect();
                        let x0: Vec<f64> = t.iter().zip(&upper).map(|(t, u)| t * u).collect();
                        let mut lp = LinearProgram::new(c.iter().map(|&v| v as f64).collect());
                        lp.upper = upper;
                        for r in rows {
                            let row: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                            let b = row.iter().zip(&x0).map(|(a, x)| a * x).sum();
                            lp.add_eq(row, b);
                        }
                        (lp, x0)
                    })
            })
        }

        proptest! {
            #[test]
            fn optimum_is_feasible_and_dominates_a_known_point((lp, x0) in arb_lp()) {
                let sol = solve_lp(&lp).unwrap();
                prop_assert!(lp.max_residual(&sol.x) < 1e-8);
                for ((v, lo), hi) in sol.x.iter().zip(&lp.lower).zip(&lp.upper) {
                    prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
                }
                let base: f64 = lp.objective.iter().zip(&x0).map(|(c, x)| c * x).sum();
                prop_assert!(sol.objective >= base - 1e-8);
                prop_assert_eq!(solve_lp(&lp).unwrap(), sol);
            }
        }
    }
}
