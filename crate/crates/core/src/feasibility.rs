//! Groundings, feasibility and the grounded-subspace operator.
//!
//! A grounding places each goal on a state-action. Combining the jump
//! operators of the grounded policies with the task transitions gives the
//! coupled dynamics of the task-level problem: from the grounding of goal
//! `l`, running the policy of goal `pi` lands on the grounding of `pi` with
//! probability `K(l, pi)` and sets bit `pi` of the task state.
//!
//! # Index layout
//!
//! Grounded-subspace coordinates `(sigma, l, pi)` (task state, goal whose
//! grounding the agent occupies, next policy) are flattened as
//!
//! ```text
//! index = (sigma * N + l) * N + pi
//! ```
//!
//! for `N` goals, giving dimension `2^N * N^2`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::base_space::{BaseSpace, StateAction};
use crate::ensemble::{GroundedView, PolicyEnsemble};
use crate::logspace::{ln_or_neg_inf, log_sum_exp};
use crate::og_task::{task_transition, TaskState};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Absorption below this is a failed jump and triggers a warning.
pub const CERTAIN_JUMP: f64 = 1.0 - 1e-9;

/// Injective map from goals to state-actions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    targets: Vec<StateAction>,
    inverse: HashMap<StateAction, usize>,
}

impl Grounding {
    pub fn new(space: &BaseSpace, targets: Vec<StateAction>) -> Result<Grounding> {
        let mut inverse = HashMap::with_capacity(targets.len());
        for (g, &t) in targets.iter().enumerate() {
            if t.state >= space.num_states() || t.action >= space.num_actions() {
                return Err(Error::Config(format!("goal {g} grounded outside the space at {t:?}")));
            }
            if space.is_obstacle(t.state) {
                return Err(Error::Obstacle { state: t.state });
            }
            if let Some(other) = inverse.insert(t, g) {
                return Err(Error::Config(format!(
                    "goals {other} and {g} are grounded to the same state-action {t:?}"
                )));
            }
        }
        Ok(Grounding { targets, inverse })
    }

    /// Grounds every goal on a state with the completion action.
    pub fn at_states(space: &BaseSpace, states: &[usize]) -> Result<Grounding> {
        let a = space.completion_action();
        Grounding::new(space, states.iter().map(|&s| StateAction::new(s, a)).collect())
    }

    /// `h(g)`.
    pub fn target(&self, goal: usize) -> StateAction {
        self.targets[goal]
    }

    pub fn targets(&self) -> &[StateAction] {
        &self.targets
    }

    /// `h_bar(x, a)`: the goal grounded at `sa`, if any.
    pub fn goal_at(&self, sa: StateAction) -> Option<usize> {
        self.inverse.get(&sa).copied()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Same grounding with goals relabelled: goal `i` of the result is goal
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Grounding {
        let targets: Vec<_> = perm.iter().map(|&i| self.targets[i]).collect();
        let inverse = targets.iter().enumerate().map(|(g, &t)| (t, g)).collect();
        Grounding { targets, inverse }
    }
}

/// `K(i, g)`: probability that the policy of goal `g`, started at the
/// grounding of goal `i`, reaches the grounding of `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl FeasibilityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> FeasibilityMatrix {
        let n = rows.len();
        FeasibilityMatrix {
            n,
            values: rows.into_iter().flatten().collect(),
        }
    }

    pub fn get(&self, i: usize, g: usize) -> f64 {
        self.values[i * self.n + g]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// Entry-wise comparison within `tol`.
    pub fn approx_eq(&self, other: &FeasibilityMatrix, tol: f64) -> bool {
        self.n == other.n && self.values.iter().zip(&other.values).all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// The feasibility function `kappa(g', x', a' | x, a, pi_g)`: the jump
/// operator of `pi_g` composed with ungrounding.
#[derive(Debug, Clone, Copy)]
pub struct Feasibility<'a> {
    ensemble: &'a PolicyEnsemble,
    view: &'a GroundedView,
    grounding: &'a Grounding,
}

impl<'a> Feasibility<'a> {
    pub fn new(ensemble: &'a PolicyEnsemble, view: &'a GroundedView, grounding: &'a Grounding) -> Result<Self> {
        if view.handles().len() != grounding.len() {
            return Err(Error::Config("view and grounding disagree on the goal count".into()));
        }
        for (g, &h) in view.handles().iter().enumerate() {
            if ensemble.targets().get(h.0) != Some(&grounding.target(g)) {
                return Err(Error::Ungrounded(g));
            }
        }
        Ok(Feasibility {
            ensemble,
            view,
            grounding,
        })
    }

    /// Probability of completing `next_goal` at `to` when running the policy
    /// of `policy_goal` from `from`.
    pub fn kappa(&self, next_goal: usize, to: StateAction, from: StateAction, policy_goal: usize) -> Result<f64> {
        if policy_goal >= self.grounding.len() {
            return Err(Error::UnknownPolicy(policy_goal));
        }
        if next_goal != policy_goal || self.grounding.goal_at(to) != Some(next_goal) {
            return Ok(0.0);
        }
        self.jump_from(from, policy_goal)
    }

    /// Absorption probability of goal `g`'s policy from `from`.
    pub fn jump_from(&self, from: StateAction, g: usize) -> Result<f64> {
        let space = self.ensemble.space();
        let member = self.ensemble.member(self.view.handle(g))?;
        Ok(member.absorption.values[space.sa_index(from)])
    }

    /// The `N x N` matrix `K`.
    pub fn matrix(&self) -> Result<FeasibilityMatrix> {
        let n = self.grounding.len();
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (g, v) in row.iter_mut().enumerate() {
                *v = self.jump_from(self.grounding.target(i), g)?;
                if *v > 0.0 && *v < CERTAIN_JUMP {
                    log::warn!("jump from goal {i} to goal {g} succeeds with probability {v}; the failed mass is dropped");
                }
            }
        }
        Ok(FeasibilityMatrix::from_rows(rows))
    }

    pub fn grounding(&self) -> &Grounding {
        self.grounding
    }
}

/// Task-level transition: from the grounding of goal `at`, running the
/// policy of goal `policy` in task state `sigma`.
#[derive(Debug, Clone, Copy)]
pub struct CoupledDynamics<'a> {
    pub k: &'a FeasibilityMatrix,
}

impl CoupledDynamics<'_> {
    /// `(sigma', l', probability)`; `None` when the jump cannot happen.
    pub fn step(&self, sigma: TaskState, at: usize, policy: usize) -> Option<(TaskState, usize, f64)> {
        let p = self.k.get(at, policy);
        (p > 0.0).then(|| (task_transition(sigma, policy), policy, p))
    }
}

/// The `(sigma, l, pi)` flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsLayout {
    pub n: usize,
}

impl GsLayout {
    pub fn new(n: usize) -> GsLayout {
        GsLayout { n }
    }

    pub fn dim(&self) -> usize {
        (1usize << self.n) * self.n * self.n
    }

    pub fn index(&self, sigma: TaskState, l: usize, pi: usize) -> usize {
        (sigma.index() * self.n + l) * self.n + pi
    }

    pub fn decode(&self, index: usize) -> (TaskState, usize, usize) {
        let pi = index % self.n;
        let rest = index / self.n;
        (TaskState((rest / self.n) as u32), rest % self.n, pi)
    }

    pub fn num_task_states(&self) -> usize {
        1 << self.n
    }

    /// Offset of the `N` consecutive `pi` entries of `(sigma, l)`.
    pub fn block(&self, sigma: TaskState, l: usize) -> usize {
        self.index(sigma, l, 0)
    }
}

/// Grounded-subspace passive operator `P_kappa`.
///
/// Row `(sigma, l, pi)` has `K(l, pi) / N` at `(sigma | pi, pi, pi')` for
/// every `pi'`: the jump lands on `pi`'s grounding and the next policy is
/// drawn uniformly. The operator is applied in this factored form;
/// [`GsOperator::to_csr`] materialises it for export.
#[derive(Debug, Clone, PartialEq)]
pub struct GsOperator {
    layout: GsLayout,
    k: FeasibilityMatrix,
}

impl GsOperator {
    pub fn layout(&self) -> GsLayout {
        self.layout
    }

    pub fn feasibility(&self) -> &FeasibilityMatrix {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn nnz(&self) -> usize {
        let n = self.layout.n;
        let positive = self.k.values.iter().filter(|&&v| v > 0.0).count();
        (1 << n) * positive * n
    }

    /// `log LSE_{pi'} w(sigma, l, pi')` for every `(sigma, l)`.
    pub fn block_log_sums(&self, log_w: &[f64]) -> Vec<f64> {
        let n = self.layout.n;
        log_w.chunks(n).map(|c| log_sum_exp(c.iter().copied())).collect()
    }

    /// `log (P_kappa w)` given `log w`.
    pub fn apply_log(&self, log_w: &[f64]) -> Vec<f64> {
        let sums = self.block_log_sums(log_w);
        let n = self.layout.n;
        let ln_n = (n as f64).ln();
        (0..self.dim())
            .map(|idx| {
                let (sigma, l, pi) = self.layout.decode(idx);
                let next = task_transition(sigma, pi);
                ln_or_neg_inf(self.k.get(l, pi)) - ln_n + sums[next.index() * n + pi]
            })
            .collect()
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.layout.n;
        let mut t = Vec::with_capacity(self.nnz());
        for idx in 0..self.dim() {
            let (sigma, l, pi) = self.layout.decode(idx);
            let p = self.k.get(l, pi);
            if p == 0.0 {
                continue;
            }
            let next = task_transition(sigma, pi);
            for pi2 in 0..n {
                t.push((idx, self.layout.index(next, pi, pi2), p / n as f64));
            }
        }
        CsrMatrix::from_triplets(self.dim(), self.dim(), &t)
    }
}

pub fn build_gs_operator(k: &FeasibilityMatrix) -> GsOperator {
    GsOperator {
        layout: GsLayout::new(k.n()),
        k: k.clone(),
    }
}

/// Entry rows `P_bar_kappa` for a start outside the grounded subspace.
///
/// Row `pi` runs the policy of goal `pi` from the start; it reaches the
/// grounding of `pi` with probability `k0[pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExteriorEntry {
    pub start: StateAction,
    pub sigma: TaskState,
    pub k0: Vec<f64>,
    /// `log z_pi(start)` for each goal's policy.
    pub log_z_pi: Vec<f64>,
}

impl ExteriorEntry {
    /// `log (P_bar_kappa w)`, one entry per first policy.
    pub fn apply_log(&self, layout: GsLayout, log_w: &[f64]) -> Vec<f64> {
        let n = layout.n;
        let ln_n = (n as f64).ln();
        (0..n)
            .map(|pi| {
                let next = task_transition(self.sigma, pi);
                let b = layout.block(next, pi);
                ln_or_neg_inf(self.k0[pi]) - ln_n + log_sum_exp(log_w[b..b + n].iter().copied())
            })
            .collect()
    }

    /// The `N x dim` entry matrix.
    pub fn to_csr(&self, layout: GsLayout) -> CsrMatrix {
        let n = layout.n;
        let mut t = Vec::new();
        for pi in 0..n {
            if self.k0[pi] == 0.0 {
                continue;
            }
            let next = task_transition(self.sigma, pi);
            for pi2 in 0..n {
                t.push((pi, layout.index(next, pi, pi2), self.k0[pi] / n as f64));
            }
        }
        CsrMatrix::from_triplets(n, layout.dim(), &t)
    }
}

pub fn exterior_entry_operator(
    feasibility: &Feasibility,
    start: StateAction,
    sigma: TaskState,
) -> Result<ExteriorEntry> {
    let space = feasibility.ensemble.space();
    if start.state >= space.num_states() || start.action >= space.num_actions() {
        return Err(Error::Config(format!("start {start:?} outside the space")));
    }
    if space.is_obstacle(start.state) {
        return Err(Error::Obstacle { state: start.state });
    }
    let n = feasibility.grounding.len();
    let i = space.sa_index(start);
    let mut k0 = Vec::with_capacity(n);
    let mut log_z_pi = Vec::with_capacity(n);
    for g in 0..n {
        let m = feasibility.ensemble.member(feasibility.view.handle(g))?;
        k0.push(m.absorption.values[i]);
        log_z_pi.push(m.desirability.log_z(i));
    }
    Ok(ExteriorEntry {
        start,
        sigma,
        k0,
        log_z_pi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_space::{build_gridworld, COMPLETE};
    use crate::ensemble::build_ensemble;
    use std::sync::Arc;

    fn setup(w: usize, h: usize, obstacles: &[(usize, usize)], states: &[usize]) -> (PolicyEnsemble, Grounding) {
        let space = Arc::new(build_gridworld(w, h, obstacles).unwrap());
        let g = Grounding::at_states(&space, states).unwrap();
        let e = build_ensemble(&space, g.targets(), 10.0, 1e-10).unwrap();
        (e, g)
    }

    #[test]
    fn grounding_rejects_duplicates_and_obstacles() {
        let space = build_gridworld(3, 3, &[(1, 1)]).unwrap();
        assert!(Grounding::at_states(&space, &[0, 0]).is_err());
        assert!(matches!(Grounding::at_states(&space, &[4]), Err(Error::Obstacle { state: 4 })));
        let g = Grounding::at_states(&space, &[0, 8]).unwrap();
        assert_eq!(g.goal_at(StateAction::new(8, COMPLETE)), Some(1));
        assert_eq!(g.goal_at(StateAction::new(8, 0)), None);
    }

    #[test]
    fn empty_grid_is_fully_connected() {
        let (e, g) = setup(4, 4, &[], &[0, 15]);
        let view = e.remap(&g).unwrap();
        let f = Feasibility::new(&e, &view, &g).unwrap();
        let k = f.matrix().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((k.get(i, j) - 1.0).abs() < 1e-12);
            }
        }
        let from = g.target(0);
        assert!(f.kappa(0, g.target(1), from, 1).unwrap() == 0.0);
        assert!((f.kappa(1, g.target(1), from, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_round_trip_and_size() {
        let l = GsLayout::new(9);
        assert_eq!(l.dim(), 41_472);
        for idx in [0, 1, 80, 81, 41_471] {
            let (s, a, b) = l.decode(idx);
            assert_eq!(l.index(s, a, b), idx);
        }
        assert_eq!(GsLayout::new(1).dim(), 2);
    }

    #[test]
    fn operator_structure() {
        let (e, g) = setup(3, 3, &[], &[0, 4, 8]);
        let view = e.remap(&g).unwrap();
        let k = Feasibility::new(&e, &view, &g).unwrap().matrix().unwrap();
        let op = build_gs_operator(&k);
        let p = op.to_csr();
        assert_eq!(p.nnz(), op.nnz());
        assert!(op.nnz() <= 8 * 27);
        let layout = op.layout();
        for idx in 0..op.dim() {
            let (sigma, _, pi) = layout.decode(idx);
            assert!(p.row_nnz(idx) <= 3);
            for (j, _) in p.row(idx) {
                let (s2, l2, _) = layout.decode(j);
                assert_eq!(s2, sigma.with(pi));
                assert_eq!(l2, pi);
            }
        }
        for s in p.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Log-domain application agrees with the explicit matrix.
        let w: Vec<f64> = (0..op.dim()).map(|i| 0.5 + (i % 7) as f64 / 10.0).collect();
        let dense = p.matvec(&w);
        let logs = op.apply_log(&w.iter().map(|v| v.ln()).collect::<Vec<_>>());
        for i in 0..op.dim() {
            assert!((logs[i].exp() - dense[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_goal_has_no_transition_mass() {
        let (e, g) = setup(3, 1, &[(1, 0)], &[0, 2]);
        let view = e.remap(&g).unwrap();
        let k = Feasibility::new(&e, &view, &g).unwrap().matrix().unwrap();
        assert_eq!(k.get(0, 1), 0.0);
        let d = CoupledDynamics { k: &k };
        assert!(d.step(TaskState(0), 0, 1).is_none());
        let (s, l, p) = d.step(TaskState(0b10), 1, 1).unwrap();
        assert_eq!((s, l), (TaskState(0b10), 1));
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exterior_start_on_obstacle_is_an_error() {
        let (e, g) = setup(3, 1, &[(1, 0)], &[0]);
        let view = e.remap(&g).unwrap();
        let f = Feasibility::new(&e, &view, &g).unwrap();
        assert!(exterior_entry_operator(&f, StateAction::new(1, 4), TaskState(0)).is_err());
        let entry = exterior_entry_operator(&f, StateAction::new(2, 4), TaskState(0)).unwrap();
        assert_eq!(entry.k0, vec![0.0]);
        assert_eq!(entry.to_csr(GsLayout::new(1)).nnz(), 0);
    }
}
