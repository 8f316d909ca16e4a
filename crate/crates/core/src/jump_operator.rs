//! Jump operators: where a goal-conditioned policy ends up.
//!
//! Running policy `pi_g` from state-action `i` induces an absorbing Markov
//! chain `U` over state-actions. The jump operator maps `i` directly to the
//! goal `g` with the absorption probability `p_abs(i)`, the solution of
//!
//! ```text
//! (I - U_gbar) p_abs = h_g
//! ```
//!
//! where `U_gbar` is `U` without the goal row and column and `h_g` is the
//! column of one-step probabilities into `g`. Only states that can reach the
//! goal enter the system; every other entry is zero.

use std::collections::VecDeque;

use crate::base_space::{BaseSpace, StateKernel};
use crate::instrument;
use crate::salmdp::SaPolicy;
use crate::sparse::{absorbing_residual, gauss_seidel_absorbing, CsrMatrix, SparseLu};
use crate::{Error, Result};

/// Systems with more unknowns than this use Gauss–Seidel instead of LU.
pub const DIRECT_SOLVE_LIMIT: usize = 50_000;

/// Largest accepted residual `|(I - U) p - h|_inf`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// Markov chain over state-actions induced by `policy`:
/// `U[(x,a), (x',a')] = p_x(x' | x, a) u(a' | x')`.
///
/// The goal row is a self-loop. Rows that step into states the policy
/// cannot steer from lose that mass, so the chain is substochastic there.
pub fn policy_chain(space: &BaseSpace, policy: &SaPolicy, goal: usize, kernel: Option<&StateKernel>) -> CsrMatrix {
    let na = space.num_actions();
    let n = space.num_state_actions();
    let mut t = Vec::with_capacity(n * na);
    for i in 0..n {
        if i == goal {
            t.push((i, i, 1.0));
            continue;
        }
        if space.is_obstacle(i / na) {
            continue;
        }
        let mut push_state = |x: usize, px: f64| {
            if policy.is_reachable(x) {
                for (a, &u) in policy.row(x).iter().enumerate() {
                    if u > 0.0 {
                        t.push((i, x * na + a, px * u));
                    }
                }
            }
        };
        match kernel {
            Some(k) => {
                for &(x, p) in k.row(i) {
                    push_state(x, p);
                }
            }
            None => push_state(space.next_of(i), 1.0),
        }
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// Absorption probabilities into one goal.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionColumn {
    pub goal: usize,
    pub values: Vec<f64>,
    /// Residual of the linear solve, infinity norm.
    pub residual: f64,
}

/// Solves the absorption system of `chain` for `goal`.
pub fn absorption(chain: &CsrMatrix, goal: usize) -> Result<AbsorptionColumn> {
    instrument::record_absorption_solve();
    absorption_unrecorded(chain, goal)
}

pub(crate) fn absorption_unrecorded(chain: &CsrMatrix, goal: usize) -> Result<AbsorptionColumn> {
    let n = chain.nrows();
    if goal >= n {
        return Err(Error::Config(format!("goal {goal} outside a chain of size {n}")));
    }
    // Reverse breadth-first search gives the states that can reach the goal
    // and their hop distance, used to order the unknowns.
    let reverse = chain.transpose();
    let mut dist = vec![usize::MAX; n];
    dist[goal] = 0;
    let mut queue = VecDeque::from([goal]);
    let mut order = Vec::new();
    while let Some(j) = queue.pop_front() {
        for (i, _) in reverse.row(j) {
            if dist[i] == usize::MAX {
                dist[i] = dist[j] + 1;
                order.push(i);
                queue.push_back(i);
            }
        }
    }

    let mut values = vec![0.0; n];
    values[goal] = 1.0;
    if order.is_empty() {
        return Ok(AbsorptionColumn {
            goal,
            values,
            residual: 0.0,
        });
    }

    // `order` lists unknowns nearest-first.
    let mut local = vec![usize::MAX; n];
    for (k, &i) in order.iter().enumerate() {
        local[i] = k;
    }
    let m = order.len();
    let mut t = Vec::new();
    let mut b = vec![0.0; m];
    for (k, &i) in order.iter().enumerate() {
        for (j, v) in chain.row(i) {
            if j == goal {
                b[k] += v;
            } else if local[j] != usize::MAX {
                t.push((k, local[j], v));
            }
        }
    }
    let tm = CsrMatrix::from_triplets(m, m, &t);

    let x = if m <= DIRECT_SOLVE_LIMIT {
        let mut a_trip: Vec<_> = t.iter().map(|&(i, j, v)| (i, j, -v)).collect();
        a_trip.extend((0..m).map(|i| (i, i, 1.0)));
        let a = CsrMatrix::from_triplets(m, m, &a_trip);
        // Farthest-first column order keeps the near-triangular structure of
        // goal-directed chains, so factorisation produces little fill.
        let col_order: Vec<usize> = (0..m).rev().collect();
        let lu = SparseLu::factor(&a, &col_order, 0.01)?;
        let mut x = lu.solve(&b);
        for _ in 0..3 {
            if absorbing_residual(&tm, &x, &b) <= RESIDUAL_TOLERANCE * 0.01 {
                break;
            }
            let ax = a.matvec(&x);
            let r: Vec<f64> = (0..m).map(|i| b[i] - ax[i]).collect();
            let dx = lu.solve(&r);
            for i in 0..m {
                x[i] += dx[i];
            }
        }
        x
    } else {
        gauss_seidel_absorbing(&tm, &b, 1e-14, 100 * m)?.0
    };

    let residual = absorbing_residual(&tm, &x, &b);
    if !(residual <= RESIDUAL_TOLERANCE) {
        return Err(Error::LinearSolve(format!(
            "absorption residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}"
        )));
    }
    for (k, &i) in order.iter().enumerate() {
        values[i] = x[k].clamp(0.0, 1.0);
    }
    Ok(AbsorptionColumn {
        goal,
        values,
        residual,
    })
}

/// Absorption column of `policy`'s chain, solved on states instead of
/// state-actions.
///
/// Every action taken in `x` lands in the same successor states, so
/// `p(x, a) = sum_x' M(x' | x, a) P(x')` with the per-state unknowns
/// `P(x) = sum_a u(a | x) [(x, a) = g ? 1 : p(x, a)]`. The reduced system
/// has `|X|` unknowns; the residual is still checked on the full chain.
pub fn policy_absorption(
    space: &BaseSpace,
    policy: &SaPolicy,
    goal: usize,
    kernel: Option<&StateKernel>,
) -> Result<AbsorptionColumn> {
    instrument::record_absorption_solve();
    policy_absorption_unrecorded(space, policy, goal, kernel)
}

pub(crate) fn policy_absorption_unrecorded(
    space: &BaseSpace,
    policy: &SaPolicy,
    goal: usize,
    kernel: Option<&StateKernel>,
) -> Result<AbsorptionColumn> {
    let na = space.num_actions();
    let ns = space.num_states();
    let n = space.num_state_actions();
    if goal >= n {
        return Err(Error::Config(format!("goal {goal} outside {n} state-actions")));
    }
    let deterministic;
    let kernel = match kernel {
        Some(k) => k,
        None => {
            deterministic = StateKernel::deterministic(space);
            &deterministic
        }
    };
    let landing = |i: usize| kernel.row(i).iter().filter(|&&(x, _)| policy.is_reachable(x));

    // State `ns` is the absorbing goal node.
    let mut t = Vec::new();
    for x in 0..ns {
        if space.is_obstacle(x) || !policy.is_reachable(x) {
            continue;
        }
        for (a, &u) in policy.row(x).iter().enumerate() {
            if u <= 0.0 {
                continue;
            }
            let i = x * na + a;
            if i == goal {
                t.push((x, ns, u));
            } else {
                t.extend(landing(i).map(|&(x2, p)| (x, x2, u * p)));
            }
        }
    }
    t.push((ns, ns, 1.0));
    let reduced = CsrMatrix::from_triplets(ns + 1, ns + 1, &t);
    let states = absorption_unrecorded(&reduced, ns)?;

    let mut values = vec![0.0; n];
    for (i, v) in values.iter_mut().enumerate() {
        if i == goal {
            *v = 1.0;
        } else if !space.is_obstacle(i / na) {
            *v = landing(i).map(|&(x2, p)| p * states.values[x2]).sum::<f64>().clamp(0.0, 1.0);
        }
    }

    let chain = policy_chain(space, policy, goal, Some(kernel));
    let mut residual = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        if i != goal {
            let tv: f64 = chain.row(i).map(|(j, w)| w * values[j]).sum();
            residual = residual.max((v - tv).abs());
        }
    }
    if !(residual <= RESIDUAL_TOLERANCE) {
        return Err(Error::LinearSolve(format!(
            "absorption residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}"
        )));
    }
    Ok(AbsorptionColumn {
        goal,
        values,
        residual,
    })
}

/// Rank-one jump maps, one column per policy handle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpOperator {
    columns: Vec<AbsorptionColumn>,
}

impl JumpOperator {
    pub fn new(columns: Vec<AbsorptionColumn>) -> Self {
        JumpOperator { columns }
    }

    pub fn column(&self, handle: usize) -> Result<&AbsorptionColumn> {
        self.columns.get(handle).ok_or(Error::UnknownPolicy(handle))
    }

    /// Probability that policy `handle` started at `from` is absorbed at `to`.
    pub fn jump(&self, from: usize, to: usize, handle: usize) -> Result<f64> {
        let col = self.column(handle)?;
        Ok(if to == col.goal { col.values[from] } else { 0.0 })
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_space::{build_gridworld, first_exit_cost, PassiveActions, StateAction, COMPLETE};
    use crate::salmdp::{extract_policy, solve_deterministic, SaLmdpProblem};

    fn solved(space: &BaseSpace, goal: StateAction) -> (CsrMatrix, usize) {
        let q = first_exit_cost(space, goal, 10.0).unwrap();
        let p = SaLmdpProblem::new(space, &PassiveActions::Uniform, &q).unwrap();
        let z = solve_deterministic(&p, 1e-12).unwrap();
        let u = extract_policy(&p, &z);
        let g = space.sa_index(goal);
        (policy_chain(space, &u, g, None), g)
    }

    #[test]
    fn goal_is_one_and_cut_off_is_zero() {
        let space = build_gridworld(4, 1, &[(2, 0)]).unwrap();
        let (chain, g) = solved(&space, StateAction::new(0, COMPLETE));
        let col = absorption(&chain, g).unwrap();
        assert_eq!(col.values[g], 1.0);
        for a in 0..6 {
            assert_eq!(col.values[3 * 6 + a], 0.0);
            assert_eq!(col.values[2 * 6 + a], 0.0);
            assert!((col.values[6 + a] - 1.0).abs() < 1e-12);
        }
        let j = JumpOperator::new(vec![col]);
        assert_eq!(j.jump(g, g, 0).unwrap(), 1.0);
        assert_eq!(j.jump(6, 7, 0).unwrap(), 0.0);
        assert!(matches!(j.jump(0, g, 3), Err(Error::UnknownPolicy(3))));
    }

    #[test]
    fn chain_rows_are_stochastic_on_reachable_part() {
        let space = build_gridworld(3, 3, &[(1, 1)]).unwrap();
        let (chain, _) = solved(&space, StateAction::new(8, COMPLETE));
        for (i, s) in chain.row_sums().into_iter().enumerate() {
            if space.is_obstacle(i / 6) {
                assert_eq!(s, 0.0);
            } else {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_level_solve_matches_the_full_chain() {
        let space = build_gridworld(5, 4, &[(1, 1), (3, 2)]).unwrap();
        let goal = StateAction::new(19, COMPLETE);
        let q = first_exit_cost(&space, goal, 10.0).unwrap();
        let g = space.sa_index(goal);
        for slip in [0.0, 0.25] {
            let kernel = StateKernel::with_slip(&space, slip).unwrap();
            let p = SaLmdpProblem::new(&space, &PassiveActions::Uniform, &q).unwrap().with_kernel(&kernel);
            let z = crate::salmdp::solve_linear_map(&p, 1e-12).unwrap();
            let u = extract_policy(&p, &z);
            let full = absorption(&policy_chain(&space, &u, g, Some(&kernel)), g).unwrap();
            let reduced = policy_absorption(&space, &u, g, Some(&kernel)).unwrap();
            for (a, b) in full.values.iter().zip(&reduced.values) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
