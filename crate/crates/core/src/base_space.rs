//! Finite deterministic base spaces and their passive dynamics.
//!
//! A base space is a set of states `x`, a set of actions `a` and a total,
//! deterministic successor map `next(x, a)`. The control problems in this
//! crate live on *state-actions* `y = (x, a)`: from `y` the world moves to
//! `x' = next(x, a)` and the controller then picks the next action `a'`.
//!
//! Grid worlds use six actions: four moves, a neutral action and the
//! sub-goal completion action. Moves that would leave the grid or enter an
//! obstacle leave the state unchanged.

use serde::{Deserialize, Serialize};

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const RIGHT: usize = 2;
pub const LEFT: usize = 3;
pub const NEUTRAL: usize = 4;
pub const COMPLETE: usize = 5;

pub const GRID_ACTION_LABELS: [&str; 6] = ["up", "down", "right", "left", "neutral", "complete"];

/// A `(state, action)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateAction {
    pub state: usize,
    pub action: usize,
}

impl StateAction {
    pub fn new(state: usize, action: usize) -> Self {
        StateAction { state, action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

/// A finite world with deterministic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSpace {
    num_states: usize,
    num_actions: usize,
    next: Vec<usize>,
    obstacles: Vec<bool>,
    action_labels: Vec<String>,
    completion_action: usize,
    neutral_action: Option<usize>,
    grid: Option<GridShape>,
}

impl BaseSpace {
    /// Builds a space from an explicit successor table `next[state][action]`.
    ///
    /// Moves into obstacles are redirected to self-loops and obstacle states
    /// self-loop on every action.
    pub fn from_table(
        next: Vec<Vec<usize>>,
        obstacles: &[usize],
        action_labels: Vec<String>,
        completion_action: usize,
    ) -> Result<BaseSpace> {
        let num_states = next.len();
        if num_states == 0 {
            return Err(Error::Config("transition table has no states".into()));
        }
        let num_actions = next[0].len();
        if num_actions == 0 {
            return Err(Error::Config("transition table has no actions".into()));
        }
        if action_labels.len() != num_actions {
            return Err(Error::Config(format!(
                "{} action labels for {} actions",
                action_labels.len(),
                num_actions
            )));
        }
        if completion_action >= num_actions {
            return Err(Error::Config(format!(
                "completion action {completion_action} out of range"
            )));
        }
        let mut blocked = vec![false; num_states];
        for &o in obstacles {
            if o >= num_states {
                return Err(Error::Config(format!("obstacle state {o} out of range")));
            }
            blocked[o] = true;
        }
        let mut flat = Vec::with_capacity(num_states * num_actions);
        for (x, row) in next.iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::Config(format!(
                    "row {x} has {} actions, expected {num_actions}",
                    row.len()
                )));
            }
            for &x2 in row {
                if x2 >= num_states {
                    return Err(Error::Config(format!(
                        "row {x} points to state {x2}, which does not exist"
                    )));
                }
                flat.push(if blocked[x] || blocked[x2] { x } else { x2 });
            }
        }
        let neutral_action = action_labels.iter().position(|l| l == "neutral");
        Ok(BaseSpace {
            num_states,
            num_actions,
            next: flat,
            obstacles: blocked,
            action_labels,
            completion_action,
            neutral_action,
            grid: None,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of state-actions, `|X| * |A|`.
    pub fn num_state_actions(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn next_state(&self, state: usize, action: usize) -> usize {
        self.next[state * self.num_actions + action]
    }

    /// Successor state of the flat state-action index `i`.
    pub fn next_of(&self, i: usize) -> usize {
        self.next[i]
    }

    pub fn is_obstacle(&self, state: usize) -> bool {
        self.obstacles[state]
    }

    pub fn obstacles(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states).filter(|&s| self.obstacles[s])
    }

    pub fn action_labels(&self) -> &[String] {
        &self.action_labels
    }

    pub fn action_by_label(&self, label: &str) -> Option<usize> {
        self.action_labels.iter().position(|l| l == label)
    }

    /// The sub-goal completion action `a_g`.
    pub fn completion_action(&self) -> usize {
        self.completion_action
    }

    /// Action used to start an agent "at rest" in a cell. Falls back to the
    /// completion action when the space has no neutral action.
    pub fn rest_action(&self) -> usize {
        self.neutral_action.unwrap_or(self.completion_action)
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.grid
    }

    /// Flat index of a state-action: `state * |A| + action`.
    pub fn sa_index(&self, sa: StateAction) -> usize {
        debug_assert!(sa.state < self.num_states && sa.action < self.num_actions);
        sa.state * self.num_actions + sa.action
    }

    pub fn state_action(&self, index: usize) -> StateAction {
        StateAction {
            state: index / self.num_actions,
            action: index % self.num_actions,
        }
    }

    /// Grid state index of cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> Result<usize> {
        let g = self
            .grid
            .ok_or_else(|| Error::Config("space is not a grid".into()))?;
        if x >= g.width || y >= g.height {
            return Err(Error::Config(format!(
                "cell ({x}, {y}) outside {}x{} grid",
                g.width, g.height
            )));
        }
        Ok(y * g.width + x)
    }

    /// Coordinates of a grid state.
    pub fn coords(&self, state: usize) -> Option<(usize, usize)> {
        self.grid.map(|g| (state % g.width, state / g.width))
    }

    /// Successor table as nested rows, the inverse of [`BaseSpace::from_table`].
    pub fn table(&self) -> Vec<Vec<usize>> {
        self.next
            .chunks(self.num_actions)
            .map(|r| r.to_vec())
            .collect()
    }
}

/// Incremental grid world construction.
///
/// ```
/// use jodp::base_space::{GridBuilder, RIGHT};
///
/// let space = GridBuilder::new(3, 1).obstacle(2, 0).build().unwrap();
/// let s0 = space.cell(0, 0).unwrap();
/// let s1 = space.cell(1, 0).unwrap();
/// assert_eq!(space.next_state(s0, RIGHT), s1);
/// assert_eq!(space.next_state(s1, RIGHT), s1);
/// ```
#[derive(Debug, Clone)]
pub struct GridBuilder {
    width: usize,
    height: usize,
    obstacles: Vec<(usize, usize)>,
    blocked: Vec<((usize, usize), usize)>,
}

impl GridBuilder {
    pub fn new(width: usize, height: usize) -> Self {
        GridBuilder {
            width,
            height,
            obstacles: Vec::new(),
            blocked: Vec::new(),
        }
    }

    pub fn obstacle(mut self, x: usize, y: usize) -> Self {
        self.obstacles.push((x, y));
        self
    }

    pub fn obstacles(mut self, cells: &[(usize, usize)]) -> Self {
        self.obstacles.extend_from_slice(cells);
        self
    }

    /// Turns a single directed move into a self-loop, e.g. the top of a cliff
    /// that can be descended but not climbed.
    pub fn block_move(mut self, from: (usize, usize), action: usize) -> Self {
        self.blocked.push((from, action));
        self
    }

    pub fn build(self) -> Result<BaseSpace> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return Err(Error::Config(format!("grid must be at least 1x1, got {w}x{h}")));
        }
        let mut obstacle_states = Vec::with_capacity(self.obstacles.len());
        for &(x, y) in &self.obstacles {
            if x >= w || y >= h {
                return Err(Error::Config(format!(
                    "obstacle ({x}, {y}) outside {w}x{h} grid"
                )));
            }
            obstacle_states.push(y * w + x);
        }
        let mut table = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = y * w + x;
                let up = if y > 0 { s - w } else { s };
                let down = if y + 1 < h { s + w } else { s };
                let right = if x + 1 < w { s + 1 } else { s };
                let left = if x > 0 { s - 1 } else { s };
                table.push(vec![up, down, right, left, s, s]);
            }
        }
        for &((x, y), a) in &self.blocked {
            if x >= w || y >= h || a >= 6 {
                return Err(Error::Config(format!(
                    "blocked move ({x}, {y}, {a}) outside the grid"
                )));
            }
            table[y * w + x][a] = y * w + x;
        }
        let labels = GRID_ACTION_LABELS.iter().map(|s| s.to_string()).collect();
        let mut space = BaseSpace::from_table(table, &obstacle_states, labels, COMPLETE)?;
        space.grid = Some(GridShape { width: w, height: h });
        Ok(space)
    }
}

/// Grid world with the standard six actions.
pub fn build_gridworld(width: usize, height: usize, obstacles: &[(usize, usize)]) -> Result<BaseSpace> {
    GridBuilder::new(width, height).obstacles(obstacles).build()
}

/// Passive action dynamics `p_a(a' | x')`.
#[derive(Debug, Clone, PartialEq)]
pub enum PassiveActions {
    /// Uniform over all actions.
    Uniform,
    /// Row-major `|X| x |A|` table of per-state action distributions.
    PerState(Vec<f64>),
}

impl PassiveActions {
    pub fn validate(&self, space: &BaseSpace) -> Result<()> {
        if let PassiveActions::PerState(p) = self {
            let a = space.num_actions();
            if p.len() != space.num_state_actions() {
                return Err(Error::Config(format!(
                    "passive action table has {} entries, expected {}",
                    p.len(),
                    space.num_state_actions()
                )));
            }
            for (x, row) in p.chunks(a).enumerate() {
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Config(format!(
                        "passive action row {x} has entries outside [0, 1]"
                    )));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "passive action row {x} sums to {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `p_a(a' | x')`.
    pub fn prob(&self, space: &BaseSpace, state: usize, action: usize) -> f64 {
        match self {
            PassiveActions::Uniform => 1.0 / space.num_actions() as f64,
            PassiveActions::PerState(p) => p[state * space.num_actions() + action],
        }
    }
}

/// State transition kernel `p_x(x' | x, a)` for stochastic variants of a
/// space. Each state-action owns a list of `(x', probability)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StateKernel {
    rows: Vec<Vec<(usize, f64)>>,
    num_states: usize,
}

impl StateKernel {
    /// The deterministic kernel of `space`.
    pub fn deterministic(space: &BaseSpace) -> StateKernel {
        StateKernel {
            rows: (0..space.num_state_actions())
                .map(|i| vec![(space.next_of(i), 1.0)])
                .collect(),
            num_states: space.num_states(),
        }
    }

    /// With probability `1 - slip` the intended successor, otherwise the
    /// successor of a uniformly random action. Obstacles keep self-loops.
    pub fn with_slip(space: &BaseSpace, slip: f64) -> Result<StateKernel> {
        if !(0.0..=1.0).contains(&slip) {
            return Err(Error::Config(format!("slip {slip} outside [0, 1]")));
        }
        let na = space.num_actions();
        let rows = (0..space.num_state_actions())
            .map(|i| {
                let x = i / na;
                let mut row = vec![(space.next_of(i), 1.0 - slip)];
                for b in 0..na {
                    row.push((space.next_state(x, b), slip / na as f64));
                }
                merge_row(row)
            })
            .collect();
        Ok(StateKernel {
            rows,
            num_states: space.num_states(),
        })
    }

    pub fn from_rows(space: &BaseSpace, rows: Vec<Vec<(usize, f64)>>) -> Result<StateKernel> {
        if rows.len() != space.num_state_actions() {
            return Err(Error::Config(format!(
                "kernel has {} rows, expected {}",
                rows.len(),
                space.num_state_actions()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            let s: f64 = row.iter().map(|&(_, p)| p).sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&(x, p)| x >= space.num_states() || p < 0.0) {
                return Err(Error::Config(format!("kernel row {i} is not a distribution")));
            }
        }
        Ok(StateKernel {
            rows: rows.into_iter().map(merge_row).collect(),
            num_states: space.num_states(),
        })
    }

    pub fn row(&self, sa: usize) -> &[(usize, f64)] {
        &self.rows[sa]
    }

    pub fn is_deterministic(&self) -> bool {
        self.rows.iter().all(|r| r.len() == 1)
    }

    /// The state factor `M` as an `|XA| x |X|` matrix.
    pub fn to_csr(&self) -> CsrMatrix {
        let t: Vec<_> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(x, p)| (i, x, p)))
            .collect();
        CsrMatrix::from_triplets(self.rows.len(), self.num_states, &t)
    }
}

fn merge_row(mut row: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    row.sort_by_key(|&(x, _)| x);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(row.len());
    for (x, p) in row {
        if p == 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 += p,
            _ => out.push((x, p)),
        }
    }
    out
}

/// State factor `M`: `M[(x, a), x'] = p_x(x' | x, a)` for the deterministic
/// dynamics of `space`.
pub fn state_factor(space: &BaseSpace) -> CsrMatrix {
    StateKernel::deterministic(space).to_csr()
}

/// Action factor `W`: `W[x', (x', a')] = p_a(a' | x')`.
pub fn action_factor(space: &BaseSpace, passive: &PassiveActions) -> CsrMatrix {
    let na = space.num_actions();
    let mut t = Vec::with_capacity(space.num_state_actions());
    for x in 0..space.num_states() {
        for a in 0..na {
            t.push((x, x * na + a, passive.prob(space, x, a)));
        }
    }
    CsrMatrix::from_triplets(space.num_states(), space.num_state_actions(), &t)
}

/// Passive joint dynamics `P_xa = M W` over state-actions.
pub fn passive_joint_dynamics(space: &BaseSpace, passive: &PassiveActions) -> Result<CsrMatrix> {
    passive.validate(space)?;
    Ok(state_factor(space).matmul(&action_factor(space, passive)))
}

/// First-exit cost over state-actions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostField {
    values: Vec<f64>,
    boundary: usize,
    interior: f64,
}

impl CostField {
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Flat index of the zero-cost boundary state-action.
    pub fn boundary(&self) -> usize {
        self.boundary
    }

    /// The interior constant `c`.
    pub fn interior(&self) -> f64 {
        self.interior
    }
}

/// Cost field with `q(goal) = 0`, `q = inf` on obstacle states and `q = c`
/// everywhere else.
pub fn first_exit_cost(space: &BaseSpace, goal: StateAction, c: f64) -> Result<CostField> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("interior cost must be positive, got {c}")));
    }
    if goal.state >= space.num_states() || goal.action >= space.num_actions() {
        return Err(Error::Config(format!("goal {goal:?} outside the space")));
    }
    if space.is_obstacle(goal.state) {
        return Err(Error::Obstacle { state: goal.state });
    }
    let na = space.num_actions();
    let mut values = vec![c; space.num_state_actions()];
    for s in space.obstacles() {
        values[s * na..(s + 1) * na].fill(f64::INFINITY);
    }
    let boundary = space.sa_index(goal);
    values[boundary] = 0.0;
    Ok(CostField {
        values,
        boundary,
        interior: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_by_three_has_nine_states_and_six_actions() {
        let s = build_gridworld(3, 3, &[]).unwrap();
        assert_eq!((s.num_states(), s.num_actions()), (9, 6));
        assert_eq!(s.action_labels()[COMPLETE], "complete");
    }

    #[test]
    fn single_cell_self_loops() {
        let s = build_gridworld(1, 1, &[]).unwrap();
        assert!((0..6).all(|a| s.next_state(0, a) == 0));
        let p = passive_joint_dynamics(&s, &PassiveActions::Uniform).unwrap();
        assert_eq!((p.nrows(), p.ncols()), (6, 6));
        for i in 0..6 {
            assert!(p.row(i).all(|(_, v)| (v - 1.0 / 6.0).abs() < 1e-15));
            assert_eq!(p.row_nnz(i), 6);
        }
    }

    #[test]
    fn obstacle_blocks_move() {
        let s = build_gridworld(2, 1, &[(1, 0)]).unwrap();
        assert_eq!(s.next_state(0, RIGHT), 0);
        assert!(s.is_obstacle(1));
        assert!(build_gridworld(2, 1, &[(2, 0)]).is_err());
    }

    #[test]
    fn corridor_row_lands_on_next_cell() {
        let s = build_gridworld(2, 1, &[]).unwrap();
        let p = passive_joint_dynamics(&s, &PassiveActions::Uniform).unwrap();
        let row = s.sa_index(StateAction::new(0, RIGHT));
        let cols: Vec<_> = p.row(row).map(|(j, _)| s.state_action(j).state).collect();
        assert_eq!(cols, vec![1; 6]);
    }

    #[test]
    fn first_exit_costs() {
        let s = build_gridworld(3, 1, &[(2, 0)]).unwrap();
        let q = first_exit_cost(&s, StateAction::new(0, COMPLETE), 10.0).unwrap();
        assert_eq!(q.get(s.sa_index(StateAction::new(0, COMPLETE))), 0.0);
        assert_eq!(q.get(s.sa_index(StateAction::new(1, UP))), 10.0);
        assert_eq!(q.get(s.sa_index(StateAction::new(2, UP))), f64::INFINITY);
        assert!(matches!(
            first_exit_cost(&s, StateAction::new(2, COMPLETE), 10.0),
            Err(Error::Obstacle { state: 2 })
        ));
    }

    #[test]
    fn slip_kernel_rows_are_distributions() {
        let s = build_gridworld(3, 3, &[(1, 1)]).unwrap();
        let k = StateKernel::with_slip(&s, 0.2).unwrap();
        for i in 0..s.num_state_actions() {
            let t: f64 = k.row(i).iter().map(|&(_, p)| p).sum();
            assert!((t - 1.0).abs() < 1e-12);
            assert!(k.row(i).iter().all(|&(x, _)| !s.is_obstacle(x) || x == i / 6));
        }
        assert!(!k.is_deterministic());
        assert!(StateKernel::deterministic(&s).is_deterministic());
    }

    fn arb_grid() -> impl Strategy<Value = BaseSpace> {
        (1usize..6, 1usize..6, proptest::collection::vec((0usize..6, 0usize..6), 0..6)).prop_map(
            |(w, h, obs)| {
                let obs: Vec<_> = obs.into_iter().filter(|&(x, y)| x < w && y < h).collect();
                build_gridworld(w, h, &obs).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn joint_dynamics_is_stochastic_and_factored(space in arb_grid()) {
            let p = passive_joint_dynamics(&space, &PassiveActions::Uniform).unwrap();
            for r in p.row_sums() {
                prop_assert!((r - 1.0).abs() <= 1e-12);
            }
            let m = state_factor(&space);
            for i in 0..m.nrows() {
                prop_assert_eq!(m.row_nnz(i), 1);
            }
        }

        #[test]
        fn index_round_trip(space in arb_grid(), k in 0usize..1000) {
            let i = k % space.num_state_actions();
            prop_assert_eq!(space.sa_index(space.state_action(i)), i);
        }

        #[test]
        fn obstacles_are_never_entered(space in arb_grid()) {
            for x in 0..space.num_states() {
                for a in 0..space.num_actions() {
                    let x2 = space.next_state(x, a);
                    if !space.is_obstacle(x) {
                        prop_assert!(!space.is_obstacle(x2));
                    }
                }
            }
        }
    }
}
