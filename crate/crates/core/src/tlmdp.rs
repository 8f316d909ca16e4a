//! The task-level LMDP on the grounded subspace.
//!
//! With `N` goals the task-level desirability `z_GS` lives on the
//! `2^N * N^2` coordinates `(sigma, l, pi)` and satisfies
//!
//! ```text
//! z_GS = Q_sigma_g Q_sigma Q_pi P_kappa z_GS,    z_GS(sigma_f, ., .) = 1
//! ```
//!
//! where `Q_sigma_g` carries the hard ordering constraints, `Q_sigma` the
//! constant per-period task cost and `Q_pi(l, pi) = z_pi(h(l))` the
//! low-level desirability of the jump. Every transition of `P_kappa` sets a
//! new task bit, so power iteration from the boundary vector is exact after
//! at most `N` changing sweeps.
//!
//! An agent that starts off the grounded subspace enters it through the
//! desirability-to-enter, one product with the entry operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_space::StateAction;
use crate::ensemble::{GroundedView, PolicyEnsemble};
use crate::feasibility::{
    build_gs_operator, exterior_entry_operator, Feasibility, FeasibilityMatrix, Grounding, GsLayout, GsOperator,
};
use crate::instrument;
use crate::logspace::log_sum_exp;
use crate::og_task::{induce_goal_orderings, ordering_cost, selection_cost, task_transition, GoalOrderings, OgTask, TaskState};
use crate::{Error, Result};

/// Log-desirabilities closer than this count as ties; ties go to the lowest
/// goal index.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// What the task level charges for running a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyCost {
    /// The policy's low-level value, `q_pi = v_pi`.
    Value,
    /// Nothing (`Q_pi = I`): only feasibility and constraints matter.
    Identity,
}

/// A task, its grounding and the ensemble that serves it.
#[derive(Debug, Clone)]
pub struct TlmdpProblem<'a> {
    ensemble: &'a PolicyEnsemble,
    task: &'a OgTask,
    grounding: Grounding,
    view: GroundedView,
    orderings: GoalOrderings,
    operator: GsOperator,
    log_z_pi: Vec<f64>,
    policy_cost: PolicyCost,
}

impl<'a> TlmdpProblem<'a> {
    pub fn new(ensemble: &'a PolicyEnsemble, task: &'a OgTask, grounding: Grounding) -> Result<Self> {
        let n = task.num_goals();
        if grounding.len() != n {
            return Err(Error::Config(format!(
                "task has {n} goals but the grounding places {}",
                grounding.len()
            )));
        }
        let view = ensemble.remap(&grounding)?;
        let feasibility = Feasibility::new(ensemble, &view, &grounding)?;
        let k = feasibility.matrix()?;
        let space = ensemble.space();
        let mut log_z_pi = vec![f64::NEG_INFINITY; n * n];
        for pi in 0..n {
            let member = ensemble.member(view.handle(pi))?;
            for l in 0..n {
                log_z_pi[l * n + pi] = member.desirability.log_z(space.sa_index(grounding.target(l)));
            }
        }
        Ok(TlmdpProblem {
            ensemble,
            task,
            orderings: induce_goal_orderings(task),
            operator: build_gs_operator(&k),
            grounding,
            view,
            log_z_pi,
            policy_cost: PolicyCost::Value,
        })
    }

    pub fn with_policy_cost(mut self, policy_cost: PolicyCost) -> Self {
        self.policy_cost = policy_cost;
        self
    }

    pub fn ensemble(&self) -> &'a PolicyEnsemble {
        self.ensemble
    }

    pub fn task(&self) -> &'a OgTask {
        self.task
    }

    pub fn grounding(&self) -> &Grounding {
        &self.grounding
    }

    pub fn view(&self) -> &GroundedView {
        &self.view
    }

    pub fn orderings(&self) -> &GoalOrderings {
        &self.orderings
    }

    pub fn operator(&self) -> &GsOperator {
        &self.operator
    }

    pub fn feasibility(&self) -> &FeasibilityMatrix {
        self.operator.feasibility()
    }

    pub fn policy_cost(&self) -> PolicyCost {
        self.policy_cost
    }

    pub fn layout(&self) -> GsLayout {
        self.operator.layout()
    }

    pub fn num_goals(&self) -> usize {
        self.task.num_goals()
    }

    /// `log z_pi(h(l))`, the low-level desirability of the jump `l -> pi`.
    pub fn log_z_pi(&self, l: usize, pi: usize) -> f64 {
        self.log_z_pi[l * self.num_goals() + pi]
    }
}

/// Diagonal cost matrices in log form (`log Q = -q`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostDiagonals {
    layout: GsLayout,
    /// Indexed `sigma * N + pi`.
    log_q_sigma_g: Vec<f64>,
    /// Indexed by `sigma`.
    log_q_sigma: Vec<f64>,
    /// Indexed `l * N + pi`.
    log_q_pi: Vec<f64>,
}

impl CostDiagonals {
    pub fn log_q_sigma_g(&self, sigma: TaskState, pi: usize) -> f64 {
        self.log_q_sigma_g[sigma.index() * self.layout.n + pi]
    }

    pub fn log_q_sigma(&self, sigma: TaskState) -> f64 {
        self.log_q_sigma[sigma.index()]
    }

    pub fn log_q_pi(&self, l: usize, pi: usize) -> f64 {
        self.log_q_pi[l * self.layout.n + pi]
    }

    /// Sum of the three log-diagonals at a grounded-subspace index.
    pub fn log_diag(&self, index: usize) -> f64 {
        let (sigma, l, pi) = self.layout.decode(index);
        self.log_q_sigma_g(sigma, pi) + self.log_q_sigma(sigma) + self.log_q_pi(l, pi)
    }

    /// Full diagonal of `Q_sigma_g` over the grounded subspace.
    pub fn q_sigma_g_diagonal(&self) -> Vec<f64> {
        (0..self.layout.dim())
            .map(|i| {
                let (s, _, pi) = self.layout.decode(i);
                self.log_q_sigma_g(s, pi).exp()
            })
            .collect()
    }

    pub fn q_sigma_diagonal(&self) -> Vec<f64> {
        (0..self.layout.dim())
            .map(|i| self.log_q_sigma(self.layout.decode(i).0).exp())
            .collect()
    }

    pub fn q_pi_diagonal(&self) -> Vec<f64> {
        (0..self.layout.dim())
            .map(|i| {
                let (_, l, pi) = self.layout.decode(i);
                self.log_q_pi(l, pi).exp()
            })
            .collect()
    }
}

pub fn build_cost_diagonals(problem: &TlmdpProblem) -> CostDiagonals {
    let layout = problem.layout();
    let n = layout.n;
    let task = problem.task;
    let final_state = task.final_state();
    let mut log_q_sigma_g = vec![0.0; layout.num_task_states() * n];
    let mut log_q_sigma = vec![0.0; layout.num_task_states()];
    for s in 0..layout.num_task_states() {
        let sigma = TaskState(s as u32);
        log_q_sigma[s] = if sigma == final_state { 0.0 } else { -task.sigma_cost() };
        for pi in 0..n {
            log_q_sigma_g[s * n + pi] = -selection_cost(sigma, pi, &problem.orderings);
        }
    }
    let log_q_pi = match problem.policy_cost {
        PolicyCost::Value => problem.log_z_pi.clone(),
        PolicyCost::Identity => vec![0.0; n * n],
    };
    CostDiagonals {
        layout,
        log_q_sigma_g,
        log_q_sigma,
        log_q_pi,
    }
}

/// Solution of the task-level problem, stored as `log z_GS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsSolution {
    pub layout: GsLayout,
    #[serde(with = "neg_inf_as_null")]
    pub log_z: Vec<f64>,
    /// Sweeps that changed the iterate.
    pub iterations: usize,
    /// Sweeps performed, including the final one that confirmed convergence.
    pub sweeps: usize,
    pub policy_cost: PolicyCost,
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| if x == f64::NEG_INFINITY { None } else { Some(x) })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl GsSolution {
    pub fn z(&self, index: usize) -> f64 {
        self.log_z[index].exp()
    }

    /// `-log z_GS`.
    pub fn value(&self, index: usize) -> f64 {
        -self.log_z[index]
    }

    pub fn log_z_at(&self, sigma: TaskState, l: usize, pi: usize) -> f64 {
        self.log_z[self.layout.index(sigma, l, pi)]
    }
}

/// Power iteration for `z_GS` from the boundary vector.
pub fn solve_gs(problem: &TlmdpProblem, eps: f64) -> Result<GsSolution> {
    instrument::record_gs_solve();
    let layout = problem.layout();
    let n = layout.n;
    let diag = build_cost_diagonals(problem);
    let final_state = problem.task.final_state();
    let dim = layout.dim();
    let fixed: Vec<f64> = (0..dim).map(|i| diag.log_diag(i)).collect();
    let is_final = |i: usize| layout.decode(i).0 == final_state;

    let mut log_z: Vec<f64> = (0..dim)
        .map(|i| if is_final(i) { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let mut iterations = 0;
    let max_sweeps = 10 * (n + 1);
    for sweep in 1..=max_sweeps {
        let propagated = problem.operator.apply_log(&log_z);
        let next: Vec<f64> = (0..dim)
            .map(|i| if is_final(i) { 0.0 } else { fixed[i] + propagated[i] })
            .collect();
        let gap = log_z
            .iter()
            .zip(&next)
            .map(|(&a, &b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max);
        log_z = next;
        if gap <= eps {
            return Ok(GsSolution {
                layout,
                log_z,
                iterations,
                sweeps: sweep,
                policy_cost: problem.policy_cost,
            });
        }
        iterations += 1;
    }
    Err(Error::NotConverged {
        iterations: max_sweeps,
        gap: f64::NAN,
    })
}

/// Desirability of entering the grounded subspace through each first policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dte {
    pub start: StateAction,
    pub sigma: TaskState,
    #[serde(with = "neg_inf_as_null")]
    pub log_values: Vec<f64>,
}

impl Dte {
    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|l| l.exp()).collect()
    }

    /// Whether any first policy leads to task completion.
    pub fn is_feasible(&self) -> bool {
        self.log_values.iter().any(|&l| l > f64::NEG_INFINITY)
    }

    pub fn best(&self) -> Option<usize> {
        greedy_index(&self.log_values)
    }
}

fn greedy_index(log_values: &[f64]) -> Option<usize> {
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    log_values.iter().position(|&l| l >= max - TIE_TOLERANCE)
}

fn sample_index<R: Rng + ?Sized>(log_values: &[f64], rng: &mut R) -> Option<usize> {
    let total = log_sum_exp(log_values.iter().copied());
    if total == f64::NEG_INFINITY {
        return None;
    }
    let mut u: f64 = rng.gen();
    for (i, &l) in log_values.iter().enumerate() {
        let p = (l - total).exp();
        if u < p {
            return Some(i);
        }
        u -= p;
    }
    log_values.iter().rposition(|&l| l > f64::NEG_INFINITY)
}

/// One product of the entry operator with `z_GS`, scaled by the start's
/// cost diagonals.
pub fn desirability_to_enter(problem: &TlmdpProblem, sol: &GsSolution, start: StateAction, sigma: TaskState) -> Result<Dte> {
    let feasibility = Feasibility::new(problem.ensemble, &problem.view, &problem.grounding)?;
    let entry = exterior_entry_operator(&feasibility, start, sigma)?;
    let n = problem.num_goals();
    if sigma == problem.task.final_state() {
        return Ok(Dte {
            start,
            sigma,
            log_values: vec![0.0; n],
        });
    }
    let diag = build_cost_diagonals(problem);
    let propagated = entry.apply_log(sol.layout, &sol.log_z);
    let log_values = (0..n)
        .map(|pi| {
            let q_pi = match sol.policy_cost {
                PolicyCost::Value => entry.log_z_pi[pi],
                PolicyCost::Identity => 0.0,
            };
            diag.log_q_sigma_g(sigma, pi) + diag.log_q_sigma(sigma) + q_pi + propagated[pi]
        })
        .collect();
    Ok(Dte {
        start,
        sigma,
        log_values,
    })
}

/// Task policy `u(pi' | sigma, l) = z_GS(sigma, l, pi') / G(sigma, l)` under
/// the uniform passive policy distribution.
#[derive(Debug, Clone, Copy)]
pub struct TaskPolicy<'s> {
    sol: &'s GsSolution,
}

pub fn extract_task_policy<'s>(sol: &'s GsSolution, _problem: &TlmdpProblem) -> TaskPolicy<'s> {
    TaskPolicy { sol }
}

impl TaskPolicy<'_> {
    fn block(&self, sigma: TaskState, l: usize) -> &[f64] {
        let b = self.sol.layout.block(sigma, l);
        &self.sol.log_z[b..b + self.sol.layout.n]
    }

    /// Next-policy distribution, `None` at dead ends.
    pub fn distribution(&self, sigma: TaskState, l: usize) -> Option<Vec<f64>> {
        let block = self.block(sigma, l);
        let g = log_sum_exp(block.iter().copied());
        (g > f64::NEG_INFINITY).then(|| block.iter().map(|&v| (v - g).exp()).collect())
    }

    pub fn greedy(&self, sigma: TaskState, l: usize) -> Option<usize> {
        greedy_index(self.block(sigma, l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Greedy,
    Sample { seed: u64 },
}

/// One period: the stretch between two task-bit flips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Period {
    /// Task state while the period runs.
    pub sigma: TaskState,
    pub goal: usize,
    /// Visited state-actions, from the period's start to the goal grounding.
    pub path: Vec<StateAction>,
    pub steps: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub start: StateAction,
    pub initial_sigma: TaskState,
    pub final_sigma: TaskState,
    pub periods: Vec<Period>,
}

impl RolloutTrace {
    pub fn total_steps(&self) -> usize {
        self.periods.iter().map(|p| p.steps).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.periods.iter().map(|p| p.cost).sum()
    }

    pub fn goal_order(&self) -> Vec<usize> {
        self.periods.iter().map(|p| p.goal).collect()
    }

    /// Periods that completed a goal while a goal it must precede was done.
    pub fn violations(&self, orderings: &GoalOrderings) -> usize {
        self.periods
            .iter()
            .filter(|p| ordering_cost(p.sigma, p.goal, orderings).is_infinite())
            .count()
    }
}

/// Executes the task policy from `start`, stitching low-level policy
/// segments until every goal is complete.
pub fn rollout(
    problem: &TlmdpProblem,
    sol: &GsSolution,
    start: StateAction,
    sigma: TaskState,
    mode: RolloutMode,
) -> Result<RolloutTrace> {
    let space = problem.ensemble.space();
    let final_state = problem.task.final_state();
    let budget = 4 * space.num_state_actions() + 16;
    let c = problem.ensemble.cost();
    let mut rng = match mode {
        RolloutMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        RolloutMode::Greedy => None,
    };
    let mut pick = |log_values: &[f64]| match rng.as_mut() {
        Some(r) => sample_index(log_values, r),
        None => greedy_index(log_values),
    };

    let mut trace = RolloutTrace {
        start,
        initial_sigma: sigma,
        final_sigma: sigma,
        periods: Vec::new(),
    };
    if sigma == final_state {
        return Ok(trace);
    }
    let dte = desirability_to_enter(problem, sol, start, sigma)?;
    let mut goal = pick(&dte.log_values).ok_or(Error::Infeasible)?;
    let mut at = start;
    let mut sigma = sigma;
    let mut low_rng = match mode {
        RolloutMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)),
        RolloutMode::Greedy => None,
    };
    loop {
        let member = problem.ensemble.member(problem.view.handle(goal))?;
        let target = problem.grounding.target(goal);
        let mut path = vec![at];
        while at != target {
            if path.len() > budget {
                return Err(Error::StepBudget(budget));
            }
            let x = space.next_state(at.state, at.action);
            let a = match low_rng.as_mut() {
                Some(r) => member.policy.sample(x, r),
                None => member.policy.greedy_action(x),
            }
            .ok_or(Error::Infeasible)?;
            at = StateAction::new(x, a);
            path.push(at);
        }
        let steps = path.len() - 1;
        trace.periods.push(Period {
            sigma,
            goal,
            path,
            steps,
            cost: steps as f64 * c + problem.task.sigma_cost(),
        });
        sigma = task_transition(sigma, goal);
        if sigma == final_state {
            break;
        }
        let b = sol.layout.block(sigma, goal);
        goal = pick(&sol.log_z[b..b + sol.layout.n]).ok_or(Error::Infeasible)?;
    }
    trace.final_sigma = sigma;
    Ok(trace)
}
