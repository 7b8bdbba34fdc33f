//! Receding-horizon manipulation planning by sequential linear programming.

use crate::essm::{Norm, StateLayout};
use crate::optkit::{solve_lp, LinearProgram, OptError};
use crate::scalar::{dot, Dense, Scalar};

/// Allowed manipulation entries; `allows(from, to)` on 0-based positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phi {
    allowed: Vec<Vec<bool>>,
}

impl Phi {
    pub fn complete(dim: usize) -> Self {
        Self { allowed: vec![vec![true; dim]; dim] }
    }

    pub fn diagonal(dim: usize) -> Self {
        let mut allowed = vec![vec![false; dim]; dim];
        (0..dim).for_each(|i| allowed[i][i] = true);
        Self { allowed }
    }

    pub fn dim(&self) -> usize {
        self.allowed.len()
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from][to]
    }

    pub fn set(&mut self, from: usize, to: usize, on: bool) {
        self.allowed[from][to] = on;
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().flatten().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets reachable from `from` (0-based).
    pub fn targets(&self, from: usize) -> impl Iterator<Item = usize> + '_ {
        self.allowed[from].iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Mode changes within the same SoC block, plus the diagonal; special states map to themselves.
pub fn allowed_transitions(layout: &StateLayout) -> Phi {
    let n_s = layout.n_s;
    let mut phi = Phi::diagonal(layout.dim());
    for b in 0..n_s {
        for from in 0..3 {
            for to in 0..3 {
                phi.set(from * n_s + b, to * n_s + b, true);
            }
        }
    }
    phi
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig<T> {
    /// Horizon T_H: periods 0..=T_H are planned.
    pub horizon: usize,
    pub n_p: usize,
    pub epsilon: T,
    pub norm: Norm,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationPlan<T> {
    pub e: Vec<Dense<T>>,
    pub objective: T,
}

impl<T: Scalar> ManipulationPlan<T> {
    pub fn first(&self) -> &Dense<T> {
        &self.e[0]
    }
}

/// Σ_{i<N_p} w Ã^i and Ã^{N_p}.
fn lookahead<T: Scalar>(a: &Dense<T>, w: &[T], n_p: usize) -> (Vec<T>, Dense<T>) {
    let mut g = vec![T::zero(); w.len()];
    let mut r = w.to_vec();
    for _ in 0..n_p {
        g.iter_mut().zip(&r).for_each(|(gi, &ri)| *gi = *gi + ri);
        r = a.left_mul_vec(&r);
    }
    (g, a.pow(n_p))
}

/// Flexibility gain of a plan relative to leaving every period untouched.
pub fn plan_objective<T: Scalar>(x0: &[T], a: &Dense<T>, w: &[T], e: &[Dense<T>], n_p: usize) -> T {
    let (g, m) = lookahead(a, w, n_p);
    let mut x = x0.to_vec();
    let mut total = T::zero();
    for eh in e {
        let z = eh.mul_vec(&x);
        total = total + dot(&g, &z) - dot(&g, &x);
        x = m.mul_vec(&z);
    }
    total
}

/// One period's LP: maximise c·(E x) over E supported on φ with unit column
/// sums and ‖E x − x‖ ≤ ε. Columns with no mass stay at the identity.
fn solve_period<T: Scalar>(x: &[T], c: &[T], phi: &Phi, cfg: &PlannerConfig<T>, current: &Dense<T>) -> Result<Dense<T>, OptError> {
    let dim = x.len();
    let mut vars: Vec<(usize, usize)> = Vec::new();
    for m in 0..dim {
        if x[m] > T::zero() {
            vars.extend(phi.targets(m).map(|n| (n, m)));
        }
    }
    let ne = vars.len();
    // Layout: E entries, then p_n, q_n with (E x)_n − x_n = p_n − q_n.
    let nv = ne + 2 * dim;
    let mut obj = vec![T::zero(); nv];
    for (k, &(n, m)) in vars.iter().enumerate() {
        obj[k] = c[n] * x[m];
    }
    let mut lp = LinearProgram::new(obj);
    for m in 0..dim {
        if x[m] > T::zero() {
            let mut row = vec![T::zero(); nv];
            for (k, &(_, mm)) in vars.iter().enumerate() {
                if mm == m {
                    row[k] = T::one();
                }
            }
            lp.add_eq(row, T::one());
        }
    }
    for n in 0..dim {
        let mut row = vec![T::zero(); nv];
        for (k, &(nn, m)) in vars.iter().enumerate() {
            if nn == n {
                row[k] = x[m];
            }
        }
        row[ne + n] = -T::one();
        row[ne + dim + n] = T::one();
        lp.add_eq(row, x[n]);
    }
    match cfg.norm {
        Norm::L1 => {
            let mut row = vec![T::zero(); nv];
            row[ne..].iter_mut().for_each(|v| *v = T::one());
            lp.add_le(row, cfg.epsilon);
        }
        Norm::LInf => {
            for n in 0..dim {
                let mut row = vec![T::zero(); nv];
                row[ne + n] = T::one();
                row[ne + dim + n] = T::one();
                lp.add_le(row, cfg.epsilon);
            }
        }
    }
    let sol = solve_lp(&lp)?;
    let mut e = current.clone();
    for m in 0..dim {
        if x[m] > T::zero() {
            for n in 0..dim {
                e[(n, m)] = T::zero();
            }
        }
    }
    for (k, &(n, m)) in vars.iter().enumerate() {
        e[(n, m)] = sol.x[k].max(T::zero()).min(T::one());
    }
    Ok(e)
}

/// Plans E_0..E_{T_H} by coordinate ascent over periods. Each period LP
/// contains the incumbent, so the objective never decreases and never falls
/// below the identity plan's zero.
pub fn plan_manipulation<T: Scalar>(
    x0: &[T],
    a: &Dense<T>,
    w: &[T],
    phi: &Phi,
    cfg: &PlannerConfig<T>,
) -> Result<ManipulationPlan<T>, OptError> {
    let dim = x0.len();
    if a.rows() != dim || w.len() != dim || phi.dim() != dim {
        return Err(OptError::Malformed("planner dimensions disagree".into()));
    }
    let (g, m) = lookahead(a, w, cfg.n_p);
    let periods = cfg.horizon + 1;
    let mut e: Vec<Dense<T>> = vec![Dense::identity(dim); periods];
    let mut best = T::zero();
    for _pass in 0..cfg.passes.max(1) {
        for h in 0..periods {
            let mut x = x0.to_vec();
            for eh in &e[..h] {
                x = m.mul_vec(&eh.mul_vec(&x));
            }
            // Downstream value of the state entering period h+1.
            let mut a_next = vec![T::zero(); dim];
            for eh in e[h + 1..].iter().rev() {
                let am = m.left_mul_vec(&a_next);
                let coef: Vec<T> = g.iter().zip(&am).map(|(&gi, &ai)| gi + ai).collect();
                let ce = eh.left_mul_vec(&coef);
                a_next = ce.iter().zip(&g).map(|(&v, &gi)| v - gi).collect();
            }
            let am = m.left_mul_vec(&a_next);
            let c: Vec<T> = g.iter().zip(&am).map(|(&gi, &ai)| gi + ai).collect();
            let candidate = solve_period(&x, &c, phi, cfg, &e[h])?;
            let saved = std::mem::replace(&mut e[h], candidate);
            let value = plan_objective(x0, a, w, &e, cfg.n_p);
            if value + T::tolerance() < best {
                e[h] = saved;
            } else {
                best = best.max(value);
            }
        }
    }
    let objective = plan_objective(x0, a, w, &e, cfg.n_p);
    Ok(ManipulationPlan { e, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eps: f64, horizon: usize, n_p: usize) -> PlannerConfig<f64> {
        PlannerConfig { horizon, n_p, epsilon: eps, norm: Norm::L1, passes: 2 }
    }

    #[test]
    fn phi_examples() {
        let l = StateLayout::new(10, 0.05, 0.95);
        let phi = allowed_transitions(&l);
        assert_eq!(phi.len(), 93);
        let t: Vec<usize> = phi.targets(14).map(|i| i + 1).collect();
        assert_eq!(t, vec![5, 15, 25]);
        let t: Vec<usize> = phi.targets(30).map(|i| i + 1).collect();
        assert_eq!(t, vec![31]);
    }

    #[test]
    fn two_state_toy_moves_epsilon_half() {
        let a = Dense::identity(2);
        let x = [0.5, 0.5];
        let w = [2.0, 0.0];
        let plan = plan_manipulation(&x, &a, &w, &Phi::complete(2), &cfg(0.2, 0, 5)).unwrap();
        let z = plan.first().mul_vec(&x);
        assert!((z[0] - 0.6).abs() < 1e-12);
        assert!((plan.objective - 0.2 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_fixes_the_image() {
        let l = StateLayout::new(3, 0.05, 0.95);
        let dim = l.dim();
        let x: Vec<f64> = (0..dim).map(|i| (i + 1) as f64).collect();
        let s: f64 = x.iter().sum();
        let x: Vec<f64> = x.iter().map(|v| v / s).collect();
        let w: Vec<f64> = crate::essm::d_upper(3);
        let plan = plan_manipulation(&x, &Dense::identity(dim), &w, &allowed_transitions(&l), &cfg(0.0, 2, 4)).unwrap();
        let z = plan.first().mul_vec(&x);
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn image_respects_budget_and_support() {
        let l = StateLayout::new(4, 0.05, 0.95);
        let dim = l.dim();
        let x: Vec<f64> = (0..dim).map(|i| ((i * 7) % 5) as f64 + 0.5).collect();
        let s: f64 = x.iter().sum();
        let x: Vec<f64> = x.iter().map(|v| v / s).collect();
        let phi = allowed_transitions(&l);
        let plan = plan_manipulation(&x, &Dense::identity(dim), &crate::essm::d_upper(4), &phi, &cfg(0.01, 2, 15)).unwrap();
        let e = plan.first();
        let z = e.mul_vec(&x);
        let d: f64 = z.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        assert!(d <= 0.01 + 1e-9);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for m in 0..dim {
            for n in 0..dim {
                if !phi.allows(m, n) {
                    assert_eq!(e[(n, m)], 0.0);
                }
            }
        }
        assert!(plan.objective > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_x(dim: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], dim).prop_filter_map("empty", |w| {
                let t: f64 = w.iter().sum();
                (t > 1e-3).then(|| w.iter().map(|v| v / t).collect())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn plan_is_feasible_and_never_worse_than_identity(
                x in arb_x(15),
                eps in 0.0..0.1f64,
                horizon in 0usize..3,
                linf: bool,
            ) {
                let l = StateLayout::new(4, 0.05, 0.95);
                let dim = l.dim();
                let phi = allowed_transitions(&l);
                let norm = if linf { Norm::LInf } else { Norm::L1 };
                let c = PlannerConfig { horizon, n_p: 15, epsilon: eps, norm, passes: 2 };
                let w = crate::essm::d_upper::<f64>(4);
                let plan = plan_manipulation(&x, &Dense::identity(dim), &w, &phi, &c).unwrap();
                prop_assert!(plan.objective >= -1e-9);
                prop_assert_eq!(plan.e.len(), horizon + 1);
                let e = plan.first();
                for m in 0..dim {
                    let col: f64 = (0..dim).map(|n| e[(n, m)]).sum();
                    prop_assert!((col - 1.0).abs() < 1e-9);
                    for n in 0..dim {
                        prop_assert!((0.0..=1.0).contains(&e[(n, m)]));
                        if !phi.allows(m, n) {
                            prop_assert_eq!(e[(n, m)], 0.0);
                        }
                    }
                }
                let z = e.mul_vec(&x);
                let d = match norm {
                    Norm::L1 => z.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum::<f64>(),
                    Norm::LInf => z.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
                };
                prop_assert!(d <= eps + 1e-9);
            }
        }
    }
}
