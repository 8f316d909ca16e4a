//! Brute-force reference solvers.
//!
//! These exist to be obviously correct, not fast: breadth-first distances,
//! value iteration over the full product of task states and state-actions,
//! exhaustive enumeration of goal orders, and Monte-Carlo estimates of
//! absorption probabilities.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::base_space::{BaseSpace, StateAction};
use crate::ensemble::{GroundedView, PolicyEnsemble};
use crate::feasibility::Grounding;
use crate::og_task::{ordering_cost, task_state_cost, GoalOrderings, OgTask, TaskState};
use crate::sparse::CsrMatrix;
use crate::{Error, Result};

/// Largest `|Sigma| |X| |A|` the full value iteration accepts.
pub const FULL_VI_BUDGET: usize = 1_000_000;

/// Number of moves from each state to `target`; `None` where unreachable.
pub fn bfs_distance(space: &BaseSpace, target: usize) -> Vec<Option<usize>> {
    let mut preds = vec![Vec::new(); space.num_states()];
    for x in 0..space.num_states() {
        for a in 0..space.num_actions() {
            let y = space.next_state(x, a);
            if y != x {
                preds[y].push(x);
            }
        }
    }
    let mut dist = vec![None; space.num_states()];
    dist[target] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(y) = queue.pop_front() {
        let d = dist[y].unwrap();
        for &x in &preds[y] {
            if dist[x].is_none() {
                dist[x] = Some(d + 1);
                queue.push_back(x);
            }
        }
    }
    dist
}

/// Steps from each state-action to the state-action `target`. From `(x, a)`
/// the world moves to `next(x, a)` and the next action is free, so the
/// distance is `1 + d(next(x, a), target.state)`.
pub fn sa_bfs_distance(space: &BaseSpace, target: StateAction) -> Vec<Option<usize>> {
    let d = bfs_distance(space, target.state);
    (0..space.num_state_actions())
        .map(|i| {
            if i == space.sa_index(target) {
                Some(0)
            } else if space.is_obstacle(i / space.num_actions()) {
                None
            } else {
                d[space.next_of(i)].map(|k| k + 1)
            }
        })
        .collect()
}

/// Optimal deterministic values over `(sigma, x, a)`.
#[derive(Debug, Clone)]
pub struct FullValues {
    n_goals: usize,
    num_sa: usize,
    values: Vec<f64>,
    pub sweeps: usize,
}

impl FullValues {
    pub fn value(&self, sigma: TaskState, sa: usize) -> f64 {
        self.values[sigma.index() * self.num_sa + sa]
    }

    pub fn n_goals(&self) -> usize {
        self.n_goals
    }

    /// Goal order followed by the greedy policy from `start`, or `None` if the
    /// task cannot be completed.
    pub fn greedy_goal_order(
        &self,
        space: &BaseSpace,
        task: &OgTask,
        grounding: &Grounding,
        start: StateAction,
    ) -> Option<Vec<usize>> {
        let mut sigma = task.initial_state();
        let mut at = space.sa_index(start);
        let mut order = Vec::new();
        let mut steps = 0;
        let na = space.num_actions();
        let limit = (1 << self.n_goals) * self.num_sa;
        let ord = crate::og_task::induce_goal_orderings(task);
        if !self.value(sigma, at).is_finite() {
            return None;
        }
        while sigma != task.final_state() {
            let x = space.next_of(at);
            let mut best = (f64::INFINITY, 0, sigma);
            for a in 0..na {
                let j = x * na + a;
                let (s2, flip) = flip_of(grounding, task, sigma, StateAction::new(x, a), &ord);
                let v = flip + self.value(s2, j);
                if v < best.0 {
                    best = (v, j, s2);
                }
            }
            if !best.0.is_finite() || steps > limit {
                return None;
            }
            if best.2 != sigma {
                order.push(grounding.goal_at(space.state_action(best.1)).unwrap());
            }
            at = best.1;
            sigma = best.2;
            steps += 1;
        }
        Some(order)
    }
}

fn flip_of(grounding: &Grounding, task: &OgTask, sigma: TaskState, sa: StateAction, ord: &GoalOrderings) -> (TaskState, f64) {
    match grounding.goal_at(sa) {
        Some(g) if !sigma.has(g) => (
            sigma.with(g),
            task_state_cost(sigma, task.final_state(), task.sigma_cost()) + ordering_cost(sigma, g, ord),
        ),
        _ => (sigma, 0.0),
    }
}

/// First-exit value iteration over the full product space.
///
/// Every transition costs `c`. Entering the grounding of an incomplete goal
/// completes it, charging the task-state cost and its ordering cost. Task
/// states are processed from the final state backwards; within one task
/// state, Bellman sweeps run until nothing changes by more than `eps`.
pub fn value_iteration_full(
    space: &BaseSpace,
    task: &OgTask,
    grounding: &Grounding,
    c: f64,
    eps: f64,
) -> Result<FullValues> {
    let n = task.num_goals();
    let num_sa = space.num_state_actions();
    let total = (1usize << n).saturating_mul(num_sa);
    if total > FULL_VI_BUDGET {
        return Err(Error::Budget(format!(
            "full value iteration needs {total} states, budget is {FULL_VI_BUDGET}"
        )));
    }
    let ord = crate::og_task::induce_goal_orderings(task);
    let na = space.num_actions();
    let mut values = vec![f64::INFINITY; total];
    let mut sigmas: Vec<u32> = (0..1u32 << n).collect();
    sigmas.sort_by_key(|s| std::cmp::Reverse(s.count_ones()));
    let final_state = task.final_state();
    let mut sweeps = 0;

    // Per grounded state-action: the goal it completes.
    let mut goal_of = vec![usize::MAX; num_sa];
    for (g, &t) in grounding.targets().iter().enumerate() {
        goal_of[space.sa_index(t)] = g;
    }

    for s in sigmas {
        let sigma = TaskState(s);
        let base = s as usize * num_sa;
        if sigma == final_state {
            for i in 0..num_sa {
                if !space.is_obstacle(i / na) {
                    values[base + i] = 0.0;
                }
            }
            continue;
        }
        let q_sigma = task_state_cost(sigma, final_state, task.sigma_cost());
        // Continuation of landing on each state-action: either a completion
        // into a later task state (already final) or the same task state.
        let mut landing = vec![f64::INFINITY; num_sa];
        for j in 0..num_sa {
            let g = goal_of[j];
            if g != usize::MAX && !sigma.has(g) {
                let s2 = sigma.with(g).index() * num_sa;
                landing[j] = q_sigma + ordering_cost(sigma, g, &ord) + values[s2 + j];
            }
        }
        let mut best_at = vec![f64::INFINITY; space.num_states()];
        loop {
            sweeps += 1;
            for x in 0..space.num_states() {
                let mut b = f64::INFINITY;
                for a in 0..na {
                    let j = x * na + a;
                    let g = goal_of[j];
                    let v = if g != usize::MAX && !sigma.has(g) {
                        landing[j]
                    } else {
                        values[base + j]
                    };
                    b = b.min(v);
                }
                best_at[x] = b;
            }
            let mut change: f64 = 0.0;
            for i in 0..num_sa {
                if space.is_obstacle(i / na) {
                    continue;
                }
                let v = c + best_at[space.next_of(i)];
                let old = values[base + i];
                if v < old {
                    change = change.max(if old.is_infinite() { f64::INFINITY } else { old - v });
                    values[base + i] = v;
                }
            }
            if change <= eps {
                break;
            }
        }
    }
    Ok(FullValues {
        n_goals: n,
        num_sa,
        values,
        sweeps,
    })
}

/// Entropy-regularised values over `(sigma, x, a, pi)` with the low-level
/// behaviour fixed to the ensemble policies.
///
/// Within a period the agent follows policy `pi` until it reaches `pi`'s
/// grounding. Each step from `y` costs `q(y) + KL(u(.|x') || p_a(.|x'))`;
/// the period's terminal value is the soft task-level continuation
/// `-log((1/N) sum_pi' exp(-V(sigma | pi, h(pi), pi')))`, and the task-level
/// costs of choosing `pi` are charged when the period begins. Values are
/// computed by iterative policy evaluation, without touching any
/// desirability vector.
#[derive(Debug, Clone)]
pub struct SoftFullValues {
    n_goals: usize,
    num_sa: usize,
    /// Indexed `((sigma * N + pi) * |XA| + sa)`.
    values: Vec<f64>,
}

impl SoftFullValues {
    pub fn value(&self, sigma: TaskState, sa: usize, pi: usize) -> f64 {
        self.values[(sigma.index() * self.n_goals + pi) * self.num_sa + sa]
    }
}

pub fn soft_full_values(
    ensemble: &PolicyEnsemble,
    view: &GroundedView,
    task: &OgTask,
    grounding: &Grounding,
    tol: f64,
) -> Result<SoftFullValues> {
    let space = ensemble.space();
    let n = task.num_goals();
    let num_sa = space.num_state_actions();
    let na = space.num_actions();
    let c = ensemble.cost();
    let ord = crate::og_task::induce_goal_orderings(task);
    let final_state = task.final_state();
    let total = (1usize << n) * n * num_sa;
    if total > 50 * FULL_VI_BUDGET {
        return Err(Error::Budget(format!("soft oracle needs {total} states")));
    }

    // Per-policy step costs q + KL and reachability.
    let mut step_cost = Vec::with_capacity(n);
    for pi in 0..n {
        let member = ensemble.member(view.handle(pi))?;
        let kl: Vec<f64> = (0..space.num_states())
            .map(|x| {
                if !member.policy.is_reachable(x) {
                    return f64::INFINITY;
                }
                (0..na)
                    .map(|a| {
                        let u = member.policy.prob(x, a);
                        if u > 0.0 {
                            u * (u / ensemble.passive().prob(space, x, a)).ln()
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        let costs: Vec<f64> = (0..num_sa)
            .map(|i| {
                if space.is_obstacle(i / na) {
                    f64::INFINITY
                } else {
                    c + kl[space.next_of(i)]
                }
            })
            .collect();
        step_cost.push(costs);
    }

    let mut values = vec![f64::INFINITY; total];
    let mut sigmas: Vec<u32> = (0..1u32 << n).collect();
    sigmas.sort_by_key(|s| std::cmp::Reverse(s.count_ones()));
    let idx = |s: usize, pi: usize, sa: usize| (s * n + pi) * num_sa + sa;

    for s in sigmas {
        let sigma = TaskState(s);
        if sigma == final_state {
            for pi in 0..n {
                for sa in 0..num_sa {
                    values[idx(s as usize, pi, sa)] = 0.0;
                }
            }
            continue;
        }
        for pi in 0..n {
            let charge = task_state_cost(sigma, final_state, task.sigma_cost())
                + if sigma.has(pi) { f64::INFINITY } else { ordering_cost(sigma, pi, &ord) };
            let next = sigma.with(pi);
            let land = space.sa_index(grounding.target(pi));
            let terms: Vec<f64> = (0..n).map(|p2| values[idx(next.index(), p2, land)]).collect();
            let terminal = if next == final_state {
                0.0
            } else {
                soft_min_uniform(&terms)
            };
            if charge.is_infinite() {
                continue;
            }
            let w = evaluate_policy(space, ensemble, view, pi, &step_cost[pi], land, terminal, tol)?;
            for sa in 0..num_sa {
                values[idx(s as usize, pi, sa)] = charge + w[sa];
            }
        }
    }
    Ok(SoftFullValues {
        n_goals: n,
        num_sa,
        values,
    })
}

/// `-log((1/N) sum exp(-v))`.
fn soft_min_uniform(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if m.is_infinite() {
        return f64::INFINITY;
    }
    let s: f64 = values.iter().map(|v| (-(v - m)).exp()).sum();
    m - (s / values.len() as f64).ln()
}

/// Expected accumulated cost of following policy `pi` until `land`, which
/// pays `terminal`. Jacobi sweeps until the largest change is below `tol`.
#[allow(clippy::too_many_arguments)]
fn evaluate_policy(
    space: &BaseSpace,
    ensemble: &PolicyEnsemble,
    view: &GroundedView,
    pi: usize,
    cost: &[f64],
    land: usize,
    terminal: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    let member = ensemble.member(view.handle(pi))?;
    let na = space.num_actions();
    let num_sa = space.num_state_actions();
    let reachable: Vec<bool> = (0..num_sa).map(|i| member.absorption.values[i] > 0.0).collect();
    let mut w: Vec<f64> = (0..num_sa)
        .map(|i| if reachable[i] { 0.0 } else { f64::INFINITY })
        .collect();
    w[land] = terminal;
    let max_sweeps = 100 * num_sa;
    for _ in 0..max_sweeps {
        let mut change: f64 = 0.0;
        let mut next = w.clone();
        for i in 0..num_sa {
            if i == land || !reachable[i] {
                continue;
            }
            let x = space.next_of(i);
            let mut e = 0.0;
            for a in 0..na {
                let u = member.policy.prob(x, a);
                if u > 0.0 {
                    e += u * w[x * na + a];
                }
            }
            let v = cost[i] + e;
            change = change.max((v - w[i]).abs());
            next[i] = v;
        }
        w = next;
        if change <= tol {
            return Ok(w);
        }
    }
    Err(Error::NotConverged {
        iterations: max_sweeps,
        gap: f64::NAN,
    })
}

/// Cheapest ordering-feasible goal permutation.
///
/// `start_legs[g]` is the cost of reaching goal `g` first; `legs[i][g]` of
/// going from goal `i` to goal `g`; `None` marks an impossible leg. Ties are
/// broken by the lexicographically smallest permutation. Returns `None`
/// when no feasible permutation exists.
pub fn enumerate_optimal_sequences(
    orderings: &GoalOrderings,
    start_legs: &[Option<f64>],
    legs: &[Vec<Option<f64>>],
) -> Option<(Vec<usize>, f64)> {
    let n = start_legs.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut path = Vec::with_capacity(n);

    fn dfs(
        n: usize,
        orderings: &GoalOrderings,
        start_legs: &[Option<f64>],
        legs: &[Vec<Option<f64>>],
        sigma: TaskState,
        cost: f64,
        path: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if path.len() == n {
            if best.as_ref().map_or(true, |b| cost < b.1) {
                *best = Some((path.clone(), cost));
            }
            return;
        }
        for g in 0..n {
            if sigma.has(g) || ordering_cost(sigma, g, orderings).is_infinite() {
                continue;
            }
            let leg = match path.last() {
                None => start_legs[g],
                Some(&i) => legs[i][g],
            };
            let Some(leg) = leg else { continue };
            path.push(g);
            dfs(n, orderings, start_legs, legs, sigma.with(g), cost + leg, path, best);
            path.pop();
        }
    }

    dfs(n, orderings, start_legs, legs, TaskState(0), 0.0, &mut path, &mut best);
    best
}

/// Leg table for [`enumerate_optimal_sequences`] from breadth-first
/// state-action distances.
pub fn bfs_legs(space: &BaseSpace, grounding: &Grounding, start: StateAction) -> (Vec<Option<f64>>, Vec<Vec<Option<f64>>>) {
    let n = grounding.len();
    let dists: Vec<_> = (0..n).map(|g| sa_bfs_distance(space, grounding.target(g))).collect();
    let to_f = |d: Option<usize>| d.map(|v| v as f64);
    let start_legs = (0..n).map(|g| to_f(dists[g][space.sa_index(start)])).collect();
    let legs = (0..n)
        .map(|i| {
            let from = space.sa_index(grounding.target(i));
            (0..n).map(|g| to_f(dists[g][from])).collect()
        })
        .collect();
    (start_legs, legs)
}

/// Truncated Neumann series `sum_{t <= terms} U_gbar^t h_g`.
pub fn neumann_absorption(chain: &CsrMatrix, goal: usize, terms: usize) -> Vec<f64> {
    let n = chain.nrows();
    let h: Vec<f64> = (0..n)
        .map(|i| if i == goal { 0.0 } else { chain.get(i, goal) })
        .collect();
    let mut acc = h.clone();
    let mut power = h;
    for _ in 0..terms {
        let mut next = vec![0.0; n];
        for (i, out) in next.iter_mut().enumerate() {
            if i == goal {
                continue;
            }
            *out = chain.row(i).filter(|&(j, _)| j != goal).map(|(j, v)| v * power[j]).sum();
        }
        for i in 0..n {
            acc[i] += next[i];
        }
        power = next;
    }
    acc[goal] = 1.0;
    acc
}

/// Fraction of `samples` walks from `start` that hit `goal` within
/// `max_steps`. Walks end early when they reach a row with no outgoing mass.
pub fn mc_absorption(chain: &CsrMatrix, goal: usize, start: usize, samples: usize, max_steps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let mut at = start;
        for _ in 0..=max_steps {
            if at == goal {
                hits += 1;
                break;
            }
            let mut u: f64 = rng.gen();
            let mut next = None;
            for (j, p) in chain.row(at) {
                if u < p {
                    next = Some(j);
                    break;
                }
                u -= p;
            }
            match next {
                Some(j) => at = j,
                None => break,
            }
        }
    }
    hits as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_space::{build_gridworld, COMPLETE, NEUTRAL};

    #[test]
    fn bfs_basics() {
        let s = build_gridworld(3, 1, &[]).unwrap();
        assert_eq!(bfs_distance(&s, 0), vec![Some(0), Some(1), Some(2)]);
        let s = build_gridworld(3, 1, &[(1, 0)]).unwrap();
        assert_eq!(bfs_distance(&s, 0), vec![Some(0), None, None]);
    }

    #[test]
    fn one_goal_full_values_are_bfs_multiples() {
        let space = build_gridworld(4, 3, &[(1, 1)]).unwrap();
        let task = OgTask::unordered(1, 0.0).unwrap();
        let g = Grounding::at_states(&space, &[11]).unwrap();
        let v = value_iteration_full(&space, &task, &g, 10.0, 1e-12).unwrap();
        let d = sa_bfs_distance(&space, g.target(0));
        for i in 0..space.num_state_actions() {
            if i == space.sa_index(g.target(0)) {
                continue;
            }
            match d[i] {
                Some(k) => assert_eq!(v.value(TaskState(0), i), 10.0 * k as f64),
                None => assert!(v.value(TaskState(0), i).is_infinite()),
            }
        }
        assert_eq!(v.value(TaskState(1), 3), 0.0);
    }

    #[test]
    fn budget_is_enforced() {
        let space = build_gridworld(60, 60, &[]).unwrap();
        let task = OgTask::unordered(6, 1.0).unwrap();
        let g = Grounding::at_states(&space, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert!(matches!(
            value_iteration_full(&space, &task, &g, 10.0, 1e-10),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn permutations_on_a_line() {
        // Goals at 1, 3 and 5 on a line, start at 0: nearest sweep.
        let space = build_gridworld(6, 1, &[]).unwrap();
        let g = Grounding::at_states(&space, &[5, 1, 3]).unwrap();
        let (s, l) = bfs_legs(&space, &g, StateAction::new(0, NEUTRAL));
        let ord = GoalOrderings::from_pairs(3, &[]);
        let (perm, cost) = enumerate_optimal_sequences(&ord, &s, &l).unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
        assert_eq!(cost, 2.0 + 3.0 + 3.0);
        let total = GoalOrderings::from_pairs(3, &[(0, 2), (2, 1)]);
        assert_eq!(enumerate_optimal_sequences(&total, &s, &l).unwrap().0, vec![0, 2, 1]);
        let cyclic = GoalOrderings::from_pairs(3, &[(0, 1), (1, 0)]);
        assert!(enumerate_optimal_sequences(&cyclic, &s, &l).is_none());
    }

    #[test]
    fn mc_trivial_chains() {
        let chain = CsrMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 1, 1.0), (2, 2, 1.0)]);
        assert_eq!(mc_absorption(&chain, 1, 0, 100, 10, 1), 1.0);
        assert_eq!(mc_absorption(&chain, 1, 2, 100, 10, 1), 0.0);
    }

    #[test]
    fn sa_distance_counts_the_arrival_step() {
        let s = build_gridworld(3, 1, &[]).unwrap();
        let d = sa_bfs_distance(&s, StateAction::new(2, COMPLETE));
        assert_eq!(d[s.sa_index(StateAction::new(2, COMPLETE))], Some(0));
        assert_eq!(d[s.sa_index(StateAction::new(2, NEUTRAL))], Some(1));
        assert_eq!(d[s.sa_index(StateAction::new(0, NEUTRAL))], Some(3));
        assert_eq!(d[s.sa_index(StateAction::new(1, 2))], Some(1));
    }
}
