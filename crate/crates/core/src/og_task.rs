//! Ordered-goal tasks.
//!
//! A task is a set of goals that must all be completed. Its state is a bit
//! vector `sigma` with bit `i` set once goal `i` is done; the all-ones
//! vector is the final state. Goals carry types, and type precedences
//! `psi_a < psi_b` induce goal precedences: goal `g_i` may not be completed
//! once any goal it must precede is already done.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest supported goal count (task states are `u32` bit sets).
pub const MAX_GOALS: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub name: String,
    #[serde(default)]
    pub types: Vec<String>,
}

impl Goal {
    pub fn new(name: impl Into<String>, types: &[&str]) -> Self {
        Goal {
            name: name.into(),
            types: types.iter().map(|t| t.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgTask {
    goals: Vec<Goal>,
    types: Vec<String>,
    goal_types: Vec<Vec<usize>>,
    type_orderings: Vec<(usize, usize)>,
    sigma_cost: f64,
}

impl OgTask {
    pub fn new(goals: Vec<Goal>, type_orderings: &[(String, String)], sigma_cost: f64) -> Result<OgTask> {
        if goals.is_empty() || goals.len() > MAX_GOALS {
            return Err(Error::Config(format!(
                "a task needs between 1 and {MAX_GOALS} goals, got {}",
                goals.len()
            )));
        }
        if !(sigma_cost >= 0.0 && sigma_cost.is_finite()) {
            return Err(Error::Config(format!("invalid task-state cost {sigma_cost}")));
        }
        let mut names = BTreeSet::new();
        for g in &goals {
            if !names.insert(g.name.as_str()) {
                return Err(Error::Config(format!("duplicate goal name {:?}", g.name)));
            }
        }
        let mut types: Vec<String> = Vec::new();
        let intern = |t: &str, types: &mut Vec<String>| match types.iter().position(|x| x == t) {
            Some(i) => i,
            None => {
                types.push(t.to_string());
                types.len() - 1
            }
        };
        let goal_types = goals
            .iter()
            .map(|g| g.types.iter().map(|t| intern(t, &mut types)).collect())
            .collect();
        let mut orderings = Vec::new();
        for (a, b) in type_orderings {
            if a == b {
                return Err(Error::Config(format!("type {a:?} cannot precede itself")));
            }
            orderings.push((intern(a, &mut types), intern(b, &mut types)));
        }
        Ok(OgTask {
            goals,
            types,
            goal_types,
            type_orderings: orderings,
            sigma_cost,
        })
    }

    /// Task without types or orderings.
    pub fn unordered(n: usize, sigma_cost: f64) -> Result<OgTask> {
        let goals = (0..n).map(|i| Goal::new(format!("g{i}"), &[])).collect();
        OgTask::new(goals, &[], sigma_cost)
    }

    pub fn num_goals(&self) -> usize {
        self.goals.len()
    }

    pub fn goals(&self) -> &[Goal] {
        &self.goals
    }

    pub fn goal_index(&self, name: &str) -> Option<usize> {
        self.goals.iter().position(|g| g.name == name)
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn type_orderings(&self) -> impl Iterator<Item = (&str, &str)> {
        self.type_orderings
            .iter()
            .map(|&(a, b)| (self.types[a].as_str(), self.types[b].as_str()))
    }

    /// Constant cost paid in every non-final task state.
    pub fn sigma_cost(&self) -> f64 {
        self.sigma_cost
    }

    pub fn initial_state(&self) -> TaskState {
        TaskState(0)
    }

    pub fn final_state(&self) -> TaskState {
        TaskState::full(self.num_goals())
    }

    pub fn num_task_states(&self) -> usize {
        1 << self.num_goals()
    }
}

/// Completion bits of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskState(pub u32);

impl TaskState {
    pub fn full(n: usize) -> TaskState {
        TaskState(((1u64 << n) - 1) as u32)
    }

    pub fn has(self, goal: usize) -> bool {
        self.0 >> goal & 1 == 1
    }

    pub fn with(self, goal: usize) -> TaskState {
        TaskState(self.0 | 1 << goal)
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Bits as a 0/1 vector of length `n`.
    pub fn bits(self, n: usize) -> Vec<u8> {
        (0..n).map(|i| self.has(i) as u8).collect()
    }
}

/// Goal-level precedences induced by the type precedences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalOrderings {
    n: usize,
    pairs: Vec<(usize, usize)>,
    dropped_self_pairs: Vec<usize>,
    successors: Vec<u32>,
}

impl GoalOrderings {
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> GoalOrderings {
        let mut set = BTreeSet::new();
        let mut dropped = BTreeSet::new();
        for &(i, j) in pairs {
            if i == j {
                dropped.insert(i);
            } else {
                set.insert((i, j));
            }
        }
        let mut successors = vec![0u32; n];
        for &(i, j) in &set {
            successors[i] |= 1 << j;
        }
        GoalOrderings {
            n,
            pairs: set.into_iter().collect(),
            dropped_self_pairs: dropped.into_iter().collect(),
            successors,
        }
    }

    /// Pairs `(i, j)`: goal `i` must be completed before goal `j`.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Goals whose types order them before themselves.
    pub fn dropped_self_pairs(&self) -> &[usize] {
        &self.dropped_self_pairs
    }

    /// Bit mask of goals that `goal` must precede.
    pub fn successors(&self, goal: usize) -> u32 {
        self.successors[goal]
    }

    pub fn num_goals(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Whether some order completes every goal without a violation.
    pub fn is_satisfiable(&self) -> bool {
        // Kahn's algorithm: a goal is ready once all its predecessors are done.
        let mut done = 0u32;
        let full = TaskState::full(self.n).0;
        while done != full {
            let ready = (0..self.n).find(|&j| {
                done >> j & 1 == 0
                    && (0..self.n).all(|i| self.successors[i] >> j & 1 == 0 || done >> i & 1 == 1)
            });
            match ready {
                Some(j) => done |= 1 << j,
                None => return false,
            }
        }
        true
    }
}

/// `O_G = {(g_i, g_j) | (psi_1, psi_2) in O_Psi, psi_1 in types(g_i), psi_2 in types(g_j)}`,
/// without self-pairs.
pub fn induce_goal_orderings(task: &OgTask) -> GoalOrderings {
    let n = task.num_goals();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let hit = task.type_orderings.iter().any(|&(a, b)| {
                task.goal_types[i].contains(&a) && task.goal_types[j].contains(&b)
            });
            if hit {
                pairs.push((i, j));
            }
        }
    }
    let ord = GoalOrderings::from_pairs(n, &pairs);
    for &g in ord.dropped_self_pairs() {
        log::warn!(
            "goal {:?} carries types that order it before itself; the self-precedence is ignored",
            task.goals[g].name
        );
    }
    ord
}

/// Sets the bit of `goal`; completing a done goal leaves the state unchanged.
pub fn task_transition(sigma: TaskState, goal: usize) -> TaskState {
    sigma.with(goal)
}

/// `inf` if some goal that `goal` must precede is already complete.
pub fn ordering_cost(sigma: TaskState, goal: usize, ord: &GoalOrderings) -> f64 {
    if ord.successors(goal) & sigma.0 != 0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Zero in the final state, `const_cost` otherwise.
pub fn task_state_cost(sigma: TaskState, final_state: TaskState, const_cost: f64) -> f64 {
    if sigma == final_state {
        0.0
    } else {
        const_cost
    }
}

/// Cost of choosing `goal` as the next sub-goal in the task-level problem:
/// the ordering cost, and `inf` for goals that are already complete.
pub fn selection_cost(sigma: TaskState, goal: usize, ord: &GoalOrderings) -> f64 {
    if sigma.has(goal) {
        f64::INFINITY
    } else {
        ordering_cost(sigma, goal, ord)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn no_type_orderings_no_goal_orderings() {
        let t = OgTask::unordered(3, 1.0).unwrap();
        assert!(induce_goal_orderings(&t).is_empty());
    }

    #[test]
    fn red_before_blue() {
        let t = OgTask::new(
            vec![Goal::new("a", &["red"]), Goal::new("b", &["blue"])],
            &[s("red", "blue")],
            1.0,
        )
        .unwrap();
        let o = induce_goal_orderings(&t);
        assert_eq!(o.pairs(), &[(0, 1)]);
        assert_eq!(ordering_cost(TaskState(0b10), 0, &o), f64::INFINITY);
        assert_eq!(ordering_cost(TaskState(0), 0, &o), 0.0);
        assert_eq!(ordering_cost(TaskState(0b01), 1, &o), 0.0);
    }

    #[test]
    fn multi_typed_goal_self_pair_is_dropped() {
        let t = OgTask::new(
            vec![Goal::new("a", &["red", "blue"]), Goal::new("b", &["blue"])],
            &[s("red", "blue")],
            1.0,
        )
        .unwrap();
        let o = induce_goal_orderings(&t);
        assert_eq!(o.pairs(), &[(0, 1)]);
        assert_eq!(o.dropped_self_pairs(), &[0]);
    }

    #[test]
    fn reflexive_type_ordering_rejected() {
        assert!(OgTask::new(vec![Goal::new("a", &["t"])], &[s("t", "t")], 1.0).is_err());
    }

    #[test]
    fn transitions() {
        assert_eq!(task_transition(TaskState(0), 1), TaskState(0b10));
        assert_eq!(task_transition(TaskState(0b01), 0), TaskState(0b01));
        assert_eq!(task_transition(TaskState(0b11), 0), TaskState(0b11));
    }

    #[test]
    fn task_state_costs() {
        let f = TaskState::full(2);
        assert_eq!(task_state_cost(f, f, 3.0), 0.0);
        assert_eq!(task_state_cost(TaskState(0), f, 3.0), 3.0);
        assert_eq!(task_state_cost(TaskState(0), f, 0.0), 0.0);
    }

    #[test]
    fn satisfiability() {
        assert!(GoalOrderings::from_pairs(3, &[(0, 1), (1, 2)]).is_satisfiable());
        assert!(!GoalOrderings::from_pairs(2, &[(0, 1), (1, 0)]).is_satisfiable());
        assert!(GoalOrderings::from_pairs(2, &[]).is_satisfiable());
    }

    fn arb_task() -> impl Strategy<Value = OgTask> {
        let types = ["a", "b", "c"];
        (
            proptest::collection::vec(proptest::collection::vec(0usize..3, 0..3), 1..5),
            proptest::collection::vec((0usize..3, 0usize..3), 0..4),
        )
            .prop_map(move |(gt, ords)| {
                let goals = gt
                    .iter()
                    .enumerate()
                    .map(|(i, ts)| Goal::new(format!("g{i}"), &ts.iter().map(|&t| types[t]).collect::<Vec<_>>()))
                    .collect();
                let ords: Vec<_> = ords
                    .into_iter()
                    .filter(|(a, b)| a != b)
                    .map(|(a, b)| s(types[a], types[b]))
                    .collect();
                OgTask::new(goals, &ords, 1.0).unwrap()
            })
    }

    proptest! {
        #[test]
        fn costs_match_direct_formula(task in arb_task()) {
            let o = induce_goal_orderings(&task);
            let n = task.num_goals();
            for sigma in 0..(1u32 << n) {
                for i in 0..n {
                    // Direct evaluation over goal and type pairs.
                    let mut direct = 0.0;
                    for j in 0..n {
                        if j == i || sigma >> j & 1 == 0 {
                            continue;
                        }
                        let ordered = task.goals()[i].types.iter().any(|ti| {
                            task.goals()[j].types.iter().any(|tj| {
                                task.type_orderings().any(|(a, b)| a == ti && b == tj)
                            })
                        });
                        if ordered {
                            direct = f64::INFINITY;
                        }
                    }
                    prop_assert_eq!(ordering_cost(TaskState(sigma), i, &o), direct);
                    let next = task_transition(TaskState(sigma), i);
                    prop_assert!(next.count() >= TaskState(sigma).count());
                    if o.successors(i) == 0 {
                        prop_assert_eq!(ordering_cost(TaskState(sigma), i, &o), 0.0);
                    }
                }
            }
            let f = task.final_state();
            for i in 0..n {
                prop_assert_eq!(task_transition(f, i), f);
            }
        }
    }
}
