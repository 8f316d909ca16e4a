//! Ensembles of goal-conditioned policies.
//!
//! Each member is a solved first-exit problem for one boundary state-action:
//! its desirability, the controlled action dynamics and the absorption
//! column of the induced chain. A *complete* ensemble has one member per
//! non-obstacle state (with the completion action as boundary) and can serve
//! any grounding of any task on the same space by re-indexing.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_space::{first_exit_cost, BaseSpace, PassiveActions, StateAction};
use crate::feasibility::Grounding;
use crate::instrument;
use crate::jump_operator::{policy_absorption_unrecorded, AbsorptionColumn};
use crate::salmdp::{self, Desirability, FixedPointMap, SaLmdpProblem, SaPolicy, SolverOptions};
use crate::{Error, Result};

/// Index of a policy inside an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolicyHandle(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Complete,
    GroundedOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub target: StateAction,
    pub desirability: Desirability,
    pub policy: SaPolicy,
    pub absorption: AbsorptionColumn,
}

impl EnsembleMember {
    /// Whether any other state-action can reach the target.
    pub fn is_reachable_from(&self, sa: usize) -> bool {
        self.absorption.values[sa] > 0.0
    }
}

/// Solved goal-conditioned policies over one base space.
#[derive(Debug)]
pub struct PolicyEnsemble {
    kind: EnsembleKind,
    space: Arc<BaseSpace>,
    passive: PassiveActions,
    cost: f64,
    eps: f64,
    targets: Vec<StateAction>,
    members: Vec<OnceLock<EnsembleMember>>,
    index: HashMap<StateAction, PolicyHandle>,
}

fn solve_member(space: &BaseSpace, passive: &PassiveActions, target: StateAction, c: f64, eps: f64) -> Result<EnsembleMember> {
    let cost = first_exit_cost(space, target, c)?;
    let problem = SaLmdpProblem::new(space, passive, &cost)?;
    let options = SolverOptions {
        eps,
        ..SolverOptions::default()
    };
    let z = salmdp::solve_unrecorded(&problem, FixedPointMap::Linear, &options)?.desirability;
    let policy = salmdp::extract_policy(&problem, &z);
    let goal = space.sa_index(target);
    let absorption = policy_absorption_unrecorded(space, &policy, goal, None)?;
    Ok(EnsembleMember {
        target,
        desirability: z,
        policy,
        absorption,
    })
}

impl PolicyEnsemble {
    fn empty(kind: EnsembleKind, space: Arc<BaseSpace>, targets: Vec<StateAction>, c: f64, eps: f64) -> Result<Self> {
        let mut index = HashMap::with_capacity(targets.len());
        for (h, &t) in targets.iter().enumerate() {
            if t.state >= space.num_states() || t.action >= space.num_actions() {
                return Err(Error::Config(format!("target {t:?} outside the space")));
            }
            if space.is_obstacle(t.state) {
                return Err(Error::Obstacle { state: t.state });
            }
            if index.insert(t, PolicyHandle(h)).is_some() {
                return Err(Error::Config(format!("duplicate ensemble target {t:?}")));
            }
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Config(format!("interior cost must be positive, got {c}")));
        }
        Ok(PolicyEnsemble {
            kind,
            space,
            passive: PassiveActions::Uniform,
            cost: c,
            eps,
            members: targets.iter().map(|_| OnceLock::new()).collect(),
            targets,
            index,
        })
    }

    /// Solves every member that is not yet solved, in parallel.
    fn solve_all(&self) -> Result<()> {
        let pending: Vec<usize> = (0..self.members.len())
            .filter(|&h| self.members[h].get().is_none())
            .collect();
        let solved: Vec<(usize, EnsembleMember)> = pending
            .par_iter()
            .map(|&h| {
                solve_member(&self.space, &self.passive, self.targets[h], self.cost, self.eps).map(|m| (h, m))
            })
            .collect::<Result<_>>()?;
        for _ in &solved {
            instrument::record_salmdp_solve();
            instrument::record_absorption_solve();
        }
        for (h, m) in solved {
            let _ = self.members[h].set(m);
        }
        Ok(())
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn space(&self) -> &Arc<BaseSpace> {
        &self.space
    }

    pub fn passive(&self) -> &PassiveActions {
        &self.passive
    }

    /// Interior cost `c` of every member problem.
    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[StateAction] {
        &self.targets
    }

    pub fn handle(&self, target: StateAction) -> Option<PolicyHandle> {
        self.index.get(&target).copied()
    }

    /// Member behind `handle`, solving it first if the ensemble is lazy.
    pub fn member(&self, handle: PolicyHandle) -> Result<&EnsembleMember> {
        let cell = self.members.get(handle.0).ok_or(Error::UnknownPolicy(handle.0))?;
        if let Some(m) = cell.get() {
            return Ok(m);
        }
        let m = solve_member(&self.space, &self.passive, self.targets[handle.0], self.cost, self.eps)?;
        instrument::record_salmdp_solve();
        instrument::record_absorption_solve();
        let _ = cell.set(m);
        Ok(cell.get().expect("member was just set"))
    }

    pub fn member_for(&self, target: StateAction) -> Result<&EnsembleMember> {
        let h = self
            .handle(target)
            .ok_or_else(|| Error::Config(format!("no ensemble member for {target:?}")))?;
        self.member(h)
    }

    /// Number of members solved so far.
    pub fn solved_count(&self) -> usize {
        self.members.iter().filter(|m| m.get().is_some()).count()
    }

    /// Policy handles for the goals of `grounding`. Pure re-indexing: no
    /// member is solved here.
    pub fn remap(&self, grounding: &Grounding) -> Result<GroundedView> {
        let mut handles = Vec::with_capacity(grounding.len());
        for (g, &t) in grounding.targets().iter().enumerate() {
            if t.state >= self.space.num_states() {
                return Err(Error::Config(format!("grounding target {t:?} outside the space")));
            }
            if self.space.is_obstacle(t.state) {
                return Err(Error::Obstacle { state: t.state });
            }
            handles.push(self.handle(t).ok_or(Error::Ungrounded(g))?);
        }
        Ok(GroundedView { handles })
    }
}

/// Eagerly solved ensemble with one member per target.
pub fn build_ensemble(space: &Arc<BaseSpace>, targets: &[StateAction], c: f64, eps: f64) -> Result<PolicyEnsemble> {
    let e = PolicyEnsemble::empty(EnsembleKind::GroundedOnly, space.clone(), targets.to_vec(), c, eps)?;
    e.solve_all()?;
    Ok(e)
}

fn complete_targets(space: &BaseSpace) -> Vec<StateAction> {
    (0..space.num_states())
        .filter(|&s| !space.is_obstacle(s))
        .map(|s| StateAction::new(s, space.completion_action()))
        .collect()
}

/// Eagerly solved ensemble with one member per non-obstacle state, each
/// paired with the completion action.
pub fn build_complete_ensemble(space: &Arc<BaseSpace>, c: f64, eps: f64) -> Result<PolicyEnsemble> {
    let e = PolicyEnsemble::empty(EnsembleKind::Complete, space.clone(), complete_targets(space), c, eps)?;
    e.solve_all()?;
    Ok(e)
}

/// Complete ensemble whose members are solved on first use.
pub fn lazy_complete_ensemble(space: &Arc<BaseSpace>, c: f64, eps: f64) -> Result<PolicyEnsemble> {
    PolicyEnsemble::empty(EnsembleKind::Complete, space.clone(), complete_targets(space), c, eps)
}

/// Goal-indexed handles into an ensemble.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedView {
    handles: Vec<PolicyHandle>,
}

impl GroundedView {
    pub fn handle(&self, goal: usize) -> PolicyHandle {
        self.handles[goal]
    }

    pub fn handles(&self) -> &[PolicyHandle] {
        &self.handles
    }
}

#[derive(Serialize, Deserialize)]
struct BundleMember {
    target: StateAction,
    iterations: usize,
    /// `log z`, with `null` for `z = 0`.
    log_z: Vec<Option<f64>>,
    /// `(state, action, probability)`.
    policy: Vec<(usize, usize, f64)>,
    /// Nonzero absorption probabilities as `(state_action, probability)`.
    absorption: Vec<(usize, f64)>,
    residual: f64,
}

#[derive(Serialize, Deserialize)]
struct Bundle {
    format: String,
    kind: EnsembleKind,
    cost: f64,
    eps: f64,
    num_states: usize,
    num_actions: usize,
    space_fingerprint: String,
    members: Vec<BundleMember>,
}

const BUNDLE_FORMAT: &str = "jodp-ensemble-v1";

/// FNV-1a over the transition table and obstacle set.
pub fn space_fingerprint(space: &BaseSpace) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    feed(space.num_states() as u64);
    feed(space.num_actions() as u64);
    for row in space.table() {
        for x in row {
            feed(x as u64);
        }
    }
    for o in space.obstacles() {
        feed(o as u64 | 1 << 63);
    }
    format!("{h:016x}")
}

impl PolicyEnsemble {
    /// JSON bundle with targets, desirabilities, policies and absorption
    /// columns. Lazy members are solved first.
    pub fn to_json(&self) -> Result<String> {
        self.solve_all()?;
        let members = self
            .members
            .iter()
            .map(|m| {
                let m = m.get().expect("all members solved");
                BundleMember {
                    target: m.target,
                    iterations: m.desirability.iterations(),
                    log_z: m
                        .desirability
                        .log_values()
                        .iter()
                        .map(|&l| if l == f64::NEG_INFINITY { None } else { Some(l) })
                        .collect(),
                    policy: m.policy.triplets(),
                    absorption: m
                        .absorption
                        .values
                        .iter()
                        .enumerate()
                        .filter(|&(_, &v)| v != 0.0)
                        .map(|(i, &v)| (i, v))
                        .collect(),
                    residual: m.absorption.residual,
                }
            })
            .collect();
        let bundle = Bundle {
            format: BUNDLE_FORMAT.into(),
            kind: self.kind,
            cost: self.cost,
            eps: self.eps,
            num_states: self.space.num_states(),
            num_actions: self.space.num_actions(),
            space_fingerprint: space_fingerprint(&self.space),
            members,
        };
        Ok(serde_json::to_string(&bundle)?)
    }

    /// Restores a bundle written by [`PolicyEnsemble::to_json`] for the same
    /// space. Performs no solves.
    pub fn from_json(space: &Arc<BaseSpace>, json: &str) -> Result<PolicyEnsemble> {
        let b: Bundle = serde_json::from_str(json)?;
        if b.format != BUNDLE_FORMAT {
            return Err(Error::Config(format!("unknown ensemble bundle format {:?}", b.format)));
        }
        if b.space_fingerprint != space_fingerprint(space) {
            return Err(Error::Config("ensemble bundle was built for a different environment".into()));
        }
        let targets = b.members.iter().map(|m| m.target).collect();
        let e = PolicyEnsemble::empty(b.kind, space.clone(), targets, b.cost, b.eps)?;
        let n = space.num_state_actions();
        for (cell, m) in e.members.iter().zip(b.members) {
            if m.log_z.len() != n {
                return Err(Error::Config("ensemble member has the wrong length".into()));
            }
            let log_z = m.log_z.into_iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
            let mut desirability = Desirability::from_log(log_z);
            desirability.set_iterations(m.iterations);
            let mut values = vec![0.0; n];
            for (i, v) in m.absorption {
                values[i] = v;
            }
            let member = EnsembleMember {
                target: m.target,
                desirability,
                policy: SaPolicy::from_triplets(space.num_states(), space.num_actions(), &m.policy),
                absorption: AbsorptionColumn {
                    goal: space.sa_index(m.target),
                    values,
                    residual: m.residual,
                },
            };
            let _ = cell.set(member);
        }
        Ok(e)
    }
}
