//! Balanced transportation problems via successive shortest paths with potentials.

use super::OptError;
use crate::scalar::Scalar;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Rows are sources, columns are sinks. Forbidden cells carry `+∞` cost.
#[derive(Debug, Clone)]
pub struct TransportationProblem<T> {
    pub cost: Vec<Vec<T>>,
    pub supply: Vec<u64>,
    pub demand: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution<T> {
    pub flow: Vec<Vec<u64>>,
    pub total_cost: T,
}

#[derive(Clone, Copy)]
struct Edge<T> {
    to: usize,
    rev: usize,
    cap: u64,
    cost: T,
}

struct HeapItem<T> {
    dist: T,
    node: usize,
}

impl<T: PartialOrd> PartialEq for HeapItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: PartialOrd> Eq for HeapItem<T> {}
impl<T: PartialOrd> PartialOrd for HeapItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: PartialOrd> Ord for HeapItem<T> {
    // Min-heap on distance, ties broken by lower node index.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

struct Network<T> {
    graph: Vec<Vec<Edge<T>>>,
}

impl<T: Scalar> Network<T> {
    fn add_edge(&mut self, u: usize, v: usize, cap: u64, cost: T) -> (usize, usize) {
        let fwd = self.graph[u].len();
        let rev = self.graph[v].len();
        self.graph[u].push(Edge { to: v, rev, cap, cost });
        self.graph[v].push(Edge {
            to: u,
            rev: fwd,
            cap: 0,
            cost: -cost,
        });
        (u, fwd)
    }
}

impl<T: Scalar> TransportationProblem<T> {
    fn validate(&self) -> Result<(), OptError> {
        let rows = self.supply.len();
        let cols = self.demand.len();
        if self.cost.len() != rows || self.cost.iter().any(|r| r.len() != cols) {
            return Err(OptError::Malformed("cost matrix shape mismatch".into()));
        }
        let s: u64 = self.supply.iter().sum();
        let d: u64 = self.demand.iter().sum();
        if s != d {
            return Err(OptError::Unbalanced { supply: s, demand: d });
        }
        if self.cost.iter().flatten().any(|c| c.is_nan() || *c == T::neg_infinity()) {
            return Err(OptError::Malformed("cost must be finite or +inf".into()));
        }
        for (j, &dj) in self.demand.iter().enumerate() {
            if dj > 0 && self.cost.iter().all(|r| !r[j].is_finite()) {
                return Err(OptError::IsolatedDemand { column: j });
            }
        }
        Ok(())
    }
}

/// Minimum-cost integral flow meeting every supply and demand exactly.
pub fn solve_transportation<T: Scalar>(
    tp: &TransportationProblem<T>,
) -> Result<TransportSolution<T>, OptError> {
    tp.validate()?;
    let rows = tp.supply.len();
    let cols = tp.demand.len();
    let source = 0;
    let sink = rows + cols + 1;
    let n = sink + 1;
    let mut net = Network {
        graph: vec![Vec::new(); n],
    };
    for (i, &s) in tp.supply.iter().enumerate() {
        if s > 0 {
            net.add_edge(source, 1 + i, s, T::zero());
        }
    }
    let mut cell_edges = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let c = tp.cost[i][j];
            if c.is_finite() && tp.supply[i] > 0 && tp.demand[j] > 0 {
                let cap = tp.supply[i].min(tp.demand[j]);
                let e = net.add_edge(1 + i, 1 + rows + j, cap, c);
                cell_edges.push((i, j, e));
            }
        }
    }
    for (j, &d) in tp.demand.iter().enumerate() {
        if d > 0 {
            net.add_edge(1 + rows + j, sink, d, T::zero());
        }
    }

    // Layered DAG: exact initial potentials in one forward sweep.
    let mut pot = vec![T::zero(); n];
    for i in 0..rows {
        for e in &net.graph[1 + i] {
            if e.cap > 0 && e.to > rows {
                let cand = pot[1 + i] + e.cost;
                if cand < pot[e.to] {
                    pot[e.to] = cand;
                }
            }
        }
    }
    let min_col = (0..cols).fold(T::zero(), |acc, j| acc.min(pot[1 + rows + j]));
    pot[sink] = min_col;

    let total: u64 = tp.demand.iter().sum();
    let mut sent = 0u64;
    let mut dist = vec![T::infinity(); n];
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
    while sent < total {
        dist.fill(T::infinity());
        prev.fill(None);
        dist[source] = T::zero();
        let mut heap = BinaryHeap::new();
        heap.push(HeapItem {
            dist: T::zero(),
            node: source,
        });
        while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (ei, e) in net.graph[u].iter().enumerate() {
                if e.cap == 0 {
                    continue;
                }
                let reduced = (e.cost + pot[u] - pot[e.to]).max(T::zero());
                let nd = d + reduced;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev[e.to] = Some((u, ei));
                    heap.push(HeapItem { dist: nd, node: e.to });
                }
            }
        }
        if !dist[sink].is_finite() {
            // Name a column whose demand could not be routed.
            let column = (0..cols)
                .find(|&j| {
                    net.graph[1 + rows + j]
                        .iter()
                        .any(|e| e.to == sink && e.cap > 0)
                })
                .unwrap_or(0);
            return Err(OptError::IsolatedDemand { column });
        }
        let cap_dist = dist[sink];
        for v in 0..n {
            pot[v] = pot[v] + dist[v].min(cap_dist);
        }
        let mut push = u64::MAX;
        let mut v = sink;
        while let Some((u, ei)) = prev[v] {
            push = push.min(net.graph[u][ei].cap);
            v = u;
        }
        push = push.min(total - sent);
        let mut v = sink;
        while let Some((u, ei)) = prev[v] {
            let rev = net.graph[u][ei].rev;
            net.graph[u][ei].cap -= push;
            net.graph[v][rev].cap += push;
            v = u;
        }
        sent += push;
    }

    let mut flow = vec![vec![0u64; cols]; rows];
    for &(i, j, (u, ei)) in &cell_edges {
        let e = net.graph[u][ei];
        flow[i][j] = net.graph[e.to][e.rev].cap;
    }
    let total_cost = objective(&tp.cost, &flow);
    Ok(TransportSolution { flow, total_cost })
}

/// Cost of a flow, summed in row-major order.
pub fn objective<T: Scalar>(cost: &[Vec<T>], flow: &[Vec<u64>]) -> T {
    let mut acc = T::zero();
    for (crow, frow) in cost.iter().zip(flow) {
        for (&c, &f) in crow.iter().zip(frow) {
            if f > 0 {
                acc = acc + c * T::from_u64(f).expect("flow fits");
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one() {
        let tp = TransportationProblem {
            cost: vec![vec![4.0]],
            supply: vec![3],
            demand: vec![3],
        };
        let sol = solve_transportation(&tp).unwrap();
        assert_eq!(sol.flow, vec![vec![3]]);
        assert_eq!(sol.total_cost, 12.0);
    }

    #[test]
    fn two_by_two_prefers_diagonal() {
        let tp = TransportationProblem {
            cost: vec![vec![1.0, 9.0], vec![9.0, 1.0]],
            supply: vec![1, 1],
            demand: vec![1, 1],
        };
        let sol = solve_transportation(&tp).unwrap();
        assert_eq!(sol.flow, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(sol.total_cost, 2.0);
    }

    #[test]
    fn isolated_column_is_named() {
        let inf = f64::INFINITY;
        let tp = TransportationProblem {
            cost: vec![vec![1.0, inf], vec![2.0, inf]],
            supply: vec![1, 1],
            demand: vec![1, 1],
        };
        assert_eq!(
            solve_transportation(&tp),
            Err(OptError::IsolatedDemand { column: 1 })
        );
    }

    #[test]
    fn unroutable_demand_is_infeasible() {
        // Column 1 is reachable only from row 0, which column 0 also needs.
        let inf = f64::INFINITY;
        let tp = TransportationProblem {
            cost: vec![vec![1.0, 1.0], vec![inf, inf]],
            supply: vec![1, 1],
            demand: vec![1, 1],
        };
        assert!(solve_transportation(&tp).is_err());
    }

    #[test]
    fn unbalanced_rejected() {
        let tp = TransportationProblem {
            cost: vec![vec![1.0]],
            supply: vec![2],
            demand: vec![1],
        };
        assert!(matches!(
            solve_transportation(&tp),
            Err(OptError::Unbalanced { .. })
        ));
    }

    #[test]
    fn negative_costs_and_bulk_supply() {
        let tp = TransportationProblem {
            cost: vec![vec![-1.0, -3.0, 0.0], vec![-2.0, -2.0, f64::INFINITY]],
            supply: vec![5, 4],
            demand: vec![3, 4, 2],
        };
        let sol = solve_transportation(&tp).unwrap();
        assert_eq!(sol.flow, vec![vec![0, 3, 2], vec![3, 1, 0]]);
        assert_eq!(sol.total_cost, -17.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_tp() -> impl Strategy<Value = TransportationProblem<f64>> {
            (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
                (
                    prop::collection::vec(prop::collection::vec(prop_oneof![4 => -5.0..5.0f64, 1 => Just(f64::INFINITY)], c), r),
                    prop::collection::vec(0u64..6, r),
                    prop::collection::vec(0.0..1.0f64, c),
                )
                    .prop_map(|(mut cost, supply, share)| {
                        // Keep one finite cell per row so supply can always leave.
                        for (i, row) in cost.iter_mut().enumerate() {
                            let j = i % row.len();
                            if row[j].is_infinite() {
                                row[j] = 0.0;
                            }
                        }
                        let total: u64 = supply.iter().sum();
                        let s: f64 = share.iter().sum::<f64>().max(1e-9);
                        let mut demand: Vec<u64> = share.iter().map(|v| (v / s * total as f64).floor() as u64).collect();
                        demand[0] += total - demand.iter().sum::<u64>();
                        TransportationProblem { cost, supply, demand }
                    })
            })
        }

        proptest! {
            #[test]
            fn flows_conserve_and_avoid_forbidden_cells(tp in arb_tp()) {
                let Ok(sol) = solve_transportation(&tp) else { return Ok(()) };
                for (row, &s) in sol.flow.iter().zip(&tp.supply) {
                    prop_assert_eq!(row.iter().sum::<u64>(), s);
                }
                for (j, &d) in tp.demand.iter().enumerate() {
                    prop_assert_eq!(sol.flow.iter().map(|r| r[j]).sum::<u64>(), d);
                }
                for (fr, cr) in sol.flow.iter().zip(&tp.cost) {
                    for (&f, &c) in fr.iter().zip(cr) {
                        prop_assert!(f == 0 || c.is_finite());
                    }
                }
                prop_assert!((objective(&tp.cost, &sol.flow) - sol.total_cost).abs() < 1e-9);
                prop_assert_eq!(solve_transportation(&tp).unwrap(), sol);
            }
        }
    }
}
