//! State-action linearly-solvable MDPs.
//!
//! With desirability `z = exp(-v)` the first-exit Bellman equation of a
//! state-action LMDP becomes `z = Q P_xa z`, where `Q = diag(exp(-q))` and
//! `P_xa = M W` factors into the state dynamics `M` and the passive action
//! dynamics `W`. For deterministic `M` the optimal `z` is the fixed point of
//! this linear map, found by power iteration from the one-hot boundary
//! vector. For stochastic `M` the exact fixed point is the one of the
//! nonlinear map `z = Q exp(M log(W z))`.
//!
//! The nonlinear map has the trivial fixed point `z = 0` off the boundary:
//! from the one-hot vector every slip into a state with `z = 0` keeps the
//! expectation of `log` at `-inf`. It is therefore iterated downwards from
//! the linear-map solution, which bounds it from above.
//!
//! Iterates are stored as `log z`.

use rand::Rng;

use crate::base_space::{BaseSpace, CostField, PassiveActions, StateKernel};
use crate::instrument;
use crate::logspace::{ln_or_neg_inf, log_sum_exp};
use crate::{Error, Result};

/// A single-goal first-exit problem.
#[derive(Debug, Clone, Copy)]
pub struct SaLmdpProblem<'a> {
    pub space: &'a BaseSpace,
    pub passive: &'a PassiveActions,
    pub cost: &'a CostField,
    /// Stochastic state dynamics. `None` means the deterministic dynamics of
    /// `space`.
    pub kernel: Option<&'a StateKernel>,
}

impl<'a> SaLmdpProblem<'a> {
    pub fn new(space: &'a BaseSpace, passive: &'a PassiveActions, cost: &'a CostField) -> Result<Self> {
        passive.validate(space)?;
        if cost.values().len() != space.num_state_actions() {
            return Err(Error::Config("cost field does not match the space".into()));
        }
        let zeros = cost.values().iter().filter(|&&q| q == 0.0).count();
        if zeros != 1 {
            return Err(Error::Config(format!(
                "expected exactly one boundary state-action, found {zeros}"
            )));
        }
        Ok(SaLmdpProblem {
            space,
            passive,
            cost,
            kernel: None,
        })
    }

    pub fn with_kernel(mut self, kernel: &'a StateKernel) -> Self {
        self.kernel = Some(kernel);
        self
    }

    fn is_deterministic(&self) -> bool {
        self.kernel.map_or(true, |k| k.is_deterministic())
    }
}

/// Desirability over state-actions, stored as `log z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Desirability {
    log_z: Vec<f64>,
    iterations: usize,
}

impl Desirability {
    pub fn from_log(log_z: Vec<f64>) -> Self {
        Desirability {
            log_z,
            iterations: 0,
        }
    }

    pub fn z(&self, i: usize) -> f64 {
        self.log_z[i].exp()
    }

    pub fn log_z(&self, i: usize) -> f64 {
        self.log_z[i]
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_z
    }

    /// `v = -log z`; `+inf` where `z = 0`.
    pub fn value(&self, i: usize) -> f64 {
        -self.log_z[i]
    }

    pub fn len(&self) -> usize {
        self.log_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_z.is_empty()
    }

    /// Iterations the solver needed.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub(crate) fn set_iterations(&mut self, iterations: usize) {
        self.iterations = iterations;
    }
}

/// Which fixed-point map to iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedPointMap {
    /// `z = Q M W z`.
    Linear,
    /// `z = Q exp(M log(W z))`.
    Nonlinear,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub eps: f64,
    /// Defaults to `10 |X||A|`.
    pub max_iterations: Option<usize>,
    pub record_gaps: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            eps: crate::DEFAULT_EPS,
            max_iterations: None,
            record_gaps: false,
        }
    }
}

/// Distance between two successive iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationGap {
    pub l1: f64,
    pub linf: f64,
    /// Largest change of `log z` (infinite while entries switch on).
    pub log: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub desirability: Desirability,
    pub gaps: Vec<IterationGap>,
}

/// Power iteration for deterministic state dynamics.
pub fn solve_deterministic(problem: &SaLmdpProblem, eps: f64) -> Result<Desirability> {
    if !problem.is_deterministic() {
        return Err(Error::Config("solve_deterministic needs deterministic dynamics".into()));
    }
    solve_with(problem, FixedPointMap::Linear, &opts(eps)).map(|r| r.desirability)
}

/// Fixed point of the nonlinear map; exact for stochastic state dynamics.
pub fn solve_stochastic(problem: &SaLmdpProblem, eps: f64) -> Result<Desirability> {
    solve_with(problem, FixedPointMap::Nonlinear, &opts(eps)).map(|r| r.desirability)
}

/// Fixed point of the linear map `z = Q M W z`, an upper bound on the
/// nonlinear solution when the state dynamics are stochastic.
pub fn solve_linear_map(problem: &SaLmdpProblem, eps: f64) -> Result<Desirability> {
    solve_with(problem, FixedPointMap::Linear, &opts(eps)).map(|r| r.desirability)
}

fn opts(eps: f64) -> SolverOptions {
    SolverOptions {
        eps,
        ..SolverOptions::default()
    }
}

pub fn solve_with(problem: &SaLmdpProblem, map: FixedPointMap, options: &SolverOptions) -> Result<SolveReport> {
    instrument::record_salmdp_solve();
    solve_unrecorded(problem, map, options)
}

pub(crate) fn solve_unrecorded(
    problem: &SaLmdpProblem,
    map: FixedPointMap,
    options: &SolverOptions,
) -> Result<SolveReport> {
    let space = problem.space;
    let n = space.num_state_actions();
    let na = space.num_actions();
    let boundary = problem.cost.boundary();
    let max_iterations = options.max_iterations.unwrap_or(10 * n);
    let deterministic = StateKernel::deterministic(space);
    let kernel = problem.kernel.unwrap_or(&deterministic);
    let log_pa: Vec<f64> = (0..n)
        .map(|i| ln_or_neg_inf(problem.passive.prob(space, i / na, i % na)))
        .collect();

    let (mut log_z, offset) = if map == FixedPointMap::Nonlinear && !problem.is_deterministic() {
        let upper = solve_unrecorded(
            problem,
            FixedPointMap::Linear,
            &SolverOptions {
                record_gaps: false,
                ..options.clone()
            },
        )?
        .desirability;
        (upper.log_z, upper.iterations)
    } else {
        let mut start = vec![f64::NEG_INFINITY; n];
        start[boundary] = 0.0;
        (start, 0)
    };
    let mut next = vec![f64::NEG_INFINITY; n];
    let mut log_g = vec![f64::NEG_INFINITY; space.num_states()];
    let mut gaps = Vec::new();

    for iteration in 1..=max_iterations {
        for (x, g) in log_g.iter_mut().enumerate() {
            let row = x * na..(x + 1) * na;
            *g = log_sum_exp(row.map(|j| log_pa[j] + log_z[j]));
        }
        for (i, out) in next.iter_mut().enumerate() {
            let q = problem.cost.get(i);
            *out = if i == boundary {
                0.0
            } else if q.is_infinite() {
                f64::NEG_INFINITY
            } else {
                let row = kernel.row(i);
                let tail = match map {
                    FixedPointMap::Linear => {
                        log_sum_exp(row.iter().map(|&(x, p)| p.ln() + log_g[x]))
                    }
                    FixedPointMap::Nonlinear => row.iter().map(|&(x, p)| p * log_g[x]).sum(),
                };
                -q + tail
            };
        }

        let gap = iteration_gap(&log_z, &next);
        if options.record_gaps {
            gaps.push(gap);
        }
        std::mem::swap(&mut log_z, &mut next);
        if gap.log <= options.eps && gap.l1 <= options.eps {
            return Ok(SolveReport {
                desirability: Desirability {
                    log_z,
                    iterations: offset + iteration,
                },
                gaps,
            });
        }
    }
    let gap = iteration_gap(&next, &log_z);
    Err(Error::NotConverged {
        iterations: max_iterations,
        gap: gap.l1,
    })
}

fn iteration_gap(old: &[f64], new: &[f64]) -> IterationGap {
    let mut gap = IterationGap {
        l1: 0.0,
        linf: 0.0,
        log: 0.0,
    };
    for (&a, &b) in old.iter().zip(new) {
        let d = (a.exp() - b.exp()).abs();
        gap.l1 += d;
        gap.linf = gap.linf.max(d);
        let dl = if a == b { 0.0 } else { (a - b).abs() };
        gap.log = gap.log.max(dl);
    }
    gap
}

/// Controlled action dynamics `u(a' | x') = p_a(a' | x') z(x', a') / G(x')`.
///
/// Rows are keyed by the state `x'` the world has just moved to. States
/// whose normaliser `G(x')` is zero cannot reach the goal and are marked
/// unreachable instead of holding NaNs.
#[derive(Debug, Clone, PartialEq)]
pub struct SaPolicy {
    num_actions: usize,
    probs: Vec<f64>,
    reachable: Vec<bool>,
}

impl SaPolicy {
    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn is_reachable(&self, state: usize) -> bool {
        self.reachable[state]
    }

    pub fn num_states(&self) -> usize {
        self.reachable.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Most likely next action at `state`; ties go to the lowest index.
    pub fn greedy_action(&self, state: usize) -> Option<usize> {
        if !self.reachable[state] {
            return None;
        }
        let mut best = 0;
        for (a, &p) in self.row(state).iter().enumerate() {
            if p > self.row(state)[best] {
                best = a;
            }
        }
        Some(best)
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Option<usize> {
        if !self.reachable[state] {
            return None;
        }
        let mut u: f64 = rng.gen();
        let row = self.row(state);
        for (a, &p) in row.iter().enumerate() {
            if u < p {
                return Some(a);
            }
            u -= p;
        }
        row.iter().rposition(|&p| p > 0.0)
    }

    /// Nonzero entries as `(state, action, probability)` triplets.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(_, &p)| p > 0.0)
            .map(|(i, &p)| (i / self.num_actions, i % self.num_actions, p))
            .collect()
    }

    pub fn from_triplets(
        num_states: usize,
        num_actions: usize,
        triplets: &[(usize, usize, f64)],
    ) -> SaPolicy {
        let mut probs = vec![0.0; num_states * num_actions];
        let mut reachable = vec![false; num_states];
        for &(x, a, p) in triplets {
            probs[x * num_actions + a] = p;
            reachable[x] = true;
        }
        SaPolicy {
            num_actions,
            probs,
            reachable,
        }
    }
}

pub fn extract_policy(problem: &SaLmdpProblem, z: &Desirability) -> SaPolicy {
    policy_from_log_z(problem.space, problem.passive, z.log_values())
}

pub(crate) fn policy_from_log_z(space: &BaseSpace, passive: &PassiveActions, log_z: &[f64]) -> SaPolicy {
    let na = space.num_actions();
    let mut probs = vec![0.0; space.num_state_actions()];
    let mut reachable = vec![false; space.num_states()];
    for x in 0..space.num_states() {
        let terms: Vec<f64> = (0..na)
            .map(|a| ln_or_neg_inf(passive.prob(space, x, a)) + log_z[x * na + a])
            .collect();
        let g = log_sum_exp(terms.iter().copied());
        if g == f64::NEG_INFINITY {
            continue;
        }
        reachable[x] = true;
        for a in 0..na {
            probs[x * na + a] = (terms[a] - g).exp();
        }
    }
    SaPolicy {
        num_actions: na,
        probs,
        reachable,
    }
}

/// `v = -log z` for every state-action.
pub fn value_of(z: &Desirability) -> Vec<f64> {
    z.log_values().iter().map(|&l| -l).collect()
}

/// Path-length estimate `S = v / c`.
pub fn shortest_path_estimate(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|&x| x / c).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_space::{build_gridworld, first_exit_cost, StateAction, COMPLETE, LEFT, RIGHT};

    fn corridor(c: f64) -> (BaseSpace, CostField) {
        let s = build_gridworld(2, 1, &[]).unwrap();
        let q = first_exit_cost(&s, StateAction::new(1, COMPLETE), c).unwrap();
        (s, q)
    }

    #[test]
    fn boundary_is_one() {
        let (s, q) = corridor(10.0);
        let p = SaLmdpProblem::new(&s, &PassiveActions::Uniform, &q).unwrap();
        let z = solve_deterministic(&p, 1e-12).unwrap();
        assert_eq!(z.z(q.boundary()), 1.0);
        assert_eq!(value_of(&z)[q.boundary()], 0.0);
    }

    #[test]
    fn walled_off_goal_leaves_zero_desirability() {
        let s = build_gridworld(3, 1, &[(1, 0)]).unwrap();
        let q = first_exit_cost(&s, StateAction::new(2, COMPLETE), 10.0).unwrap();
        let p = SaLmdpProblem::new(&s, &PassiveActions::Uniform, &q).unwrap();
        let z = solve_deterministic(&p, 1e-12).unwrap();
        for a in 0..6 {
            assert_eq!(z.z(a), 0.0);
            assert_eq!(z.value(a), f64::INFINITY);
        }
        let u = extract_policy(&p, &z);
        assert!(!u.is_reachable(0));
        assert!(u.row(0).iter().all(|p| *p == 0.0));
        assert_eq!(u.greedy_action(0), None);
    }

    #[test]
    fn policy_prefers_goal_action() {
        let (s, q) = corridor(10.0);
        let p = SaLmdpProblem::new(&s, &PassiveActions::Uniform, &q).unwrap();
        let z = solve_deterministic(&p, 1e-12).unwrap();
        let u = extract_policy(&p, &z);
        assert_eq!(u.greedy_action(1), Some(COMPLETE));
        assert_eq!(u.greedy_action(0), Some(RIGHT));
        assert!(u.prob(1, COMPLETE) > 0.999);
        assert!(u.prob(0, LEFT) < u.prob(0, RIGHT));
        for x in 0..2 {
            assert!((u.row(x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn requires_single_boundary() {
        let (s, _) = corridor(10.0);
        let q = first_exit_cost(&s, StateAction::new(1, COMPLETE), 10.0).unwrap();
        assert!(SaLmdpProblem::new(&s, &PassiveActions::Uniform, &q).is_ok());
        let bad = PassiveActions::PerState(vec![0.5; 12]);
        assert!(SaLmdpProblem::new(&s, &bad, &q).is_err());
    }

    #[test]
    fn deterministic_maps_agree() {
        let s = build_gridworld(4, 3, &[(1, 1)]).unwrap();
        let q = first_exit_cost(&s, StateAction::new(7, COMPLETE), 5.0).unwrap();
        let p = SaLmdpProblem::new(&s, &PassiveActions::Uniform, &q).unwrap();
        let a = solve_linear_map(&p, 1e-12).unwrap();
        let b = solve_stochastic(&p, 1e-12).unwrap();
        for i in 0..s.num_state_actions() {
            let (x, y) = (a.log_z(i), b.log_z(i));
            assert!(x == y || (x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn shortest_path_estimate_scales() {
        assert_eq!(shortest_path_estimate(&[0.0, 200.0], 100.0), vec![0.0, 2.0]);
    }
}
