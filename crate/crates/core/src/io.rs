//! JSON file formats for environments, tasks, solutions and traces.
//!
//! Environment files describe either a grid
//!
//! ```json
//! {"width": 5, "height": 4, "obstacles": [[2, 1]], "blocked_moves": [[[1, 0], "down"]]}
//! ```
//!
//! or an explicit transition table
//!
//! ```json
//! {"num_states": 2, "num_actions": 2, "next": [[1, 0], [1, 1]], "action_labels": ["go", "done"], "completion_action": 1}
//! ```
//!
//! Task files list goals with their types and groundings, plus type-level
//! ordering pairs:
//!
//! ```json
//! {"goals": [{"name": "a", "types": ["key"], "ground": [0, 0]},
//!            {"name": "b", "types": ["door"], "ground": [3, 2, "complete"]}],
//!  "type_orderings": [["key", "door"]], "sigma_cost": 1.0}
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::base_space::{BaseSpace, GridBuilder, StateAction, GRID_ACTION_LABELS};
use crate::feasibility::Grounding;
use crate::og_task::{Goal, OgTask};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSpec {
    Grid(GridSpec),
    Table(TableSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub obstacles: Vec<(usize, usize)>,
    /// Moves turned into self-loops: `[[x, y], "action"]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocked_moves: Vec<((usize, usize), String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub next: Vec<Vec<usize>>,
    #[serde(default)]
    pub obstacles: Vec<usize>,
    #[serde(default)]
    pub action_labels: Option<Vec<String>>,
    /// Defaults to the last action.
    #[serde(default)]
    pub completion_action: Option<usize>,
}

impl EnvSpec {
    pub fn grid(width: usize, height: usize, obstacles: Vec<(usize, usize)>) -> EnvSpec {
        EnvSpec::Grid(GridSpec {
            width,
            height,
            obstacles,
            blocked_moves: Vec::new(),
        })
    }

    pub fn build(&self) -> Result<BaseSpace> {
        match self {
            EnvSpec::Grid(g) => {
                let mut b = GridBuilder::new(g.width, g.height).obstacles(&g.obstacles);
                for (cell, label) in &g.blocked_moves {
                    let a = GRID_ACTION_LABELS
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| Error::Config(format!("unknown grid action {label:?}")))?;
                    b = b.block_move(*cell, a);
                }
                b.build()
            }
            EnvSpec::Table(t) => {
                if t.next.len() != t.num_states {
                    return Err(Error::Config(format!(
                        "num_states is {} but the table has {} rows",
                        t.num_states,
                        t.next.len()
                    )));
                }
                if t.next.first().is_some_and(|r| r.len() != t.num_actions) {
                    return Err(Error::Config(format!("num_actions is {} but rows differ", t.num_actions)));
                }
                let labels = t
                    .action_labels
                    .clone()
                    .unwrap_or_else(|| (0..t.num_actions).map(|a| format!("a{a}")).collect());
                let completion = t.completion_action.unwrap_or(t.num_actions.saturating_sub(1));
                BaseSpace::from_table(t.next.clone(), &t.obstacles, labels, completion)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub goals: Vec<GoalSpec>,
    #[serde(default)]
    pub type_orderings: Vec<(String, String)>,
    #[serde(default = "default_sigma_cost")]
    pub sigma_cost: f64,
}

fn default_sigma_cost() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub name: String,
    #[serde(default)]
    pub types: Vec<String>,
    pub ground: GroundSpec,
}

/// Where a goal is grounded. Without an action the completion action is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundSpec {
    Cell(usize, usize),
    CellAction(usize, usize, String),
    State {
        state: usize,
        #[serde(default)]
        action: Option<String>,
    },
}

impl GroundSpec {
    pub fn resolve(&self, space: &BaseSpace) -> Result<StateAction> {
        let action = |label: &Option<String>| match label {
            None => Ok(space.completion_action()),
            Some(l) => space
                .action_by_label(l)
                .ok_or_else(|| Error::Config(format!("unknown action {l:?}"))),
        };
        match self {
            GroundSpec::Cell(x, y) => Ok(StateAction::new(space.cell(*x, *y)?, space.completion_action())),
            GroundSpec::CellAction(x, y, a) => Ok(StateAction::new(space.cell(*x, *y)?, action(&Some(a.clone()))?)),
            GroundSpec::State { state, action: a } => {
                if *state >= space.num_states() {
                    return Err(Error::Config(format!("state {state} out of range")));
                }
                Ok(StateAction::new(*state, action(a)?))
            }
        }
    }

    /// Grid cells print as `[x, y]`, everything else by state index.
    pub fn from_state_action(space: &BaseSpace, sa: StateAction) -> GroundSpec {
        let label = space.action_labels()[sa.action].clone();
        match space.coords(sa.state) {
            Some((x, y)) if sa.action == space.completion_action() => GroundSpec::Cell(x, y),
            Some((x, y)) => GroundSpec::CellAction(x, y, label),
            None => GroundSpec::State {
                state: sa.state,
                action: Some(label),
            },
        }
    }
}

impl TaskSpec {
    pub fn to_task(&self) -> Result<OgTask> {
        let goals = self
            .goals
            .iter()
            .map(|g| Goal {
                name: g.name.clone(),
                types: g.types.clone(),
            })
            .collect();
        OgTask::new(goals, &self.type_orderings, self.sigma_cost)
    }

    pub fn grounding(&self, space: &BaseSpace) -> Result<Grounding> {
        let targets = self
            .goals
            .iter()
            .map(|g| g.ground.resolve(space))
            .collect::<Result<Vec<_>>>()?;
        Grounding::new(space, targets)
    }

    /// Copy with every goal re-grounded.
    pub fn with_grounding(&self, space: &BaseSpace, grounding: &Grounding) -> Result<TaskSpec> {
        if grounding.len() != self.goals.len() {
            return Err(Error::Config(format!(
                "grounding has {} goals, task has {}",
                grounding.len(),
                self.goals.len()
            )));
        }
        let mut out = self.clone();
        for (g, goal) in out.goals.iter_mut().enumerate() {
            goal.ground = GroundSpec::from_state_action(space, grounding.target(g));
        }
        Ok(out)
    }
}

/// Grounding file for `reground`: one entry per goal, in goal order, or a
/// name-keyed object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundingSpec {
    List(Vec<GroundSpec>),
    ByName(std::collections::BTreeMap<String, GroundSpec>),
}

impl GroundingSpec {
    pub fn resolve(&self, space: &BaseSpace, task: &OgTask) -> Result<Grounding> {
        let targets = match self {
            GroundingSpec::List(l) => {
                if l.len() != task.num_goals() {
                    return Err(Error::Config(format!(
                        "grounding lists {} goals, task has {}",
                        l.len(),
                        task.num_goals()
                    )));
                }
                l.iter().map(|g| g.resolve(space)).collect::<Result<Vec<_>>>()?
            }
            GroundingSpec::ByName(m) => task
                .goals()
                .iter()
                .map(|goal| {
                    m.get(&goal.name)
                        .ok_or_else(|| Error::Config(format!("goal {:?} missing from grounding", goal.name)))?
                        .resolve(space)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Grounding::new(space, targets)
    }
}

/// Reads and parses a JSON file; errors carry the path and the position.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_json(&text, path)
}

pub fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::File {
        path: path.display().to_string(),
        message: format!("{e} (line {}, column {})", e.line(), e.column()),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_env(path: &Path) -> Result<(EnvSpec, BaseSpace)> {
    let spec: EnvSpec = read_json(path)?;
    let space = spec.build().map_err(|e| Error::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((spec, space))
}

pub fn load_task(path: &Path, space: &BaseSpace) -> Result<(TaskSpec, OgTask, Grounding)> {
    let spec: TaskSpec = read_json(path)?;
    let wrap = |e: Error| Error::File {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let task = spec.to_task().map_err(wrap)?;
    let grounding = spec.grounding(space).map_err(wrap)?;
    Ok((spec, task, grounding))
}
