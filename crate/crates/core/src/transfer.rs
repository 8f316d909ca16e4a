//! Regrounding and zero-shot transfer between groundings.
//!
//! Two groundings of the same task share a grounded-subspace solution when
//! their feasibility matrices `K` agree and their low-level desirability
//! diagonals differ by a constant factor `gamma` (tc-GIE): then the second
//! fixed point is a scalar multiple of the first and every argmax agrees.
//! When only `K` agrees (t-GIE), the solution of the system without
//! low-level costs (`Q_pi = I`) still transfers; it respects all hard
//! constraints but no longer minimises trajectory length.

use serde::Serialize;

use crate::feasibility::{FeasibilityMatrix, Grounding};
use crate::tlmdp::{GsSolution, PolicyCost, TlmdpProblem};
use crate::{Error, Result};

/// Default tolerance for both the `K` comparison and the `gamma` spread.
pub const DEFAULT_GIE_TOLERANCE: f64 = 1e-6;

/// Entry-wise tolerance on `K`.
pub const K_TOLERANCE: f64 = 1e-9;

/// `S(i, g) = v_g(h(i)) / c` over grounded pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShortestPathMatrix {
    pub n: usize,
    pub values: Vec<Vec<f64>>,
}

impl ShortestPathMatrix {
    pub fn from_problem(problem: &TlmdpProblem) -> ShortestPathMatrix {
        let n = problem.num_goals();
        let c = problem.ensemble().cost();
        let values = (0..n)
            .map(|i| (0..n).map(|g| -problem.log_z_pi(i, g) / c).collect())
            .collect();
        ShortestPathMatrix { n, values }
    }

    pub fn get(&self, i: usize, g: usize) -> f64 {
        self.values[i][g]
    }
}

/// Same task, new grounding, same ensemble. Only re-indexing happens here;
/// the caller re-solves the task level.
pub fn reground<'a>(problem: &TlmdpProblem<'a>, grounding: Grounding) -> Result<TlmdpProblem<'a>> {
    Ok(TlmdpProblem::new(problem.ensemble(), problem.task(), grounding)?.with_policy_cost(problem.policy_cost()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GieKind {
    TcGie { gamma: f64 },
    TGie,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GieVerdict {
    pub kind: GieKind,
    pub k_equal: bool,
    /// Largest relative deviation of an off-diagonal ratio from `gamma`.
    pub ratio_spread: Option<f64>,
    pub s1: ShortestPathMatrix,
    pub s2: ShortestPathMatrix,
    pub k1: FeasibilityMatrix,
    pub k2: FeasibilityMatrix,
}

/// Classifies a pair of groundings of the same task.
///
/// `gamma` is the median of the off-diagonal ratios
/// `z_pi,1(h1(l)) / z_pi,2(h2(l))`; entries unreachable in both are skipped.
/// tc-GIE requires every ratio within relative `tol` of `gamma`.
pub fn check_gie(p1: &TlmdpProblem, p2: &TlmdpProblem, tol: f64) -> Result<GieVerdict> {
    let n = p1.num_goals();
    if p2.num_goals() != n || p1.orderings().pairs() != p2.orderings().pairs() {
        return Err(Error::Config("grounding invariance needs the same task on both sides".into()));
    }
    let k1 = p1.feasibility().clone();
    let k2 = p2.feasibility().clone();
    let k_equal = k1.approx_eq(&k2, K_TOLERANCE);

    let mut log_ratios = Vec::new();
    let mut consistent = true;
    for l in 0..n {
        for pi in 0..n {
            if l == pi {
                continue;
            }
            let (a, b) = (p1.log_z_pi(l, pi), p2.log_z_pi(l, pi));
            match (a.is_finite(), b.is_finite()) {
                (true, true) => log_ratios.push(a - b),
                (false, false) => {}
                _ => consistent = false,
            }
        }
    }
    let mut ratio_spread = None;
    let mut gamma = None;
    if consistent && !log_ratios.is_empty() {
        let mut sorted = log_ratios.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        let spread = log_ratios
            .iter()
            .map(|r| (r - median).exp_m1().abs())
            .fold(0.0, f64::max);
        ratio_spread = Some(spread);
        gamma = Some(median.exp());
    } else if consistent {
        // A single goal has no off-diagonal entries.
        ratio_spread = Some(0.0);
        gamma = Some(1.0);
    }

    let kind = match (k_equal, gamma, ratio_spread) {
        (true, Some(g), Some(s)) if s <= tol => GieKind::TcGie { gamma: g },
        (true, _, _) => GieKind::TGie,
        _ => GieKind::None,
    };
    Ok(GieVerdict {
        kind,
        k_equal,
        ratio_spread,
        s1: ShortestPathMatrix::from_problem(p1),
        s2: ShortestPathMatrix::from_problem(p2),
        k1,
        k2,
    })
}

/// Reuses `sol1` as the solution of `p2` without any power iteration.
///
/// tc-GIE reuses the vector as is. t-GIE requires `sol1` to come from the
/// cost-free system ([`PolicyCost::Identity`]) and `p2` to use it too.
pub fn zero_shot_apply(sol1: &GsSolution, p2: &TlmdpProblem, verdict: &GieVerdict) -> Result<GsSolution> {
    if sol1.layout != p2.layout() {
        return Err(Error::TransferRefused("grounded subspaces differ in size".into()));
    }
    match verdict.kind {
        GieKind::None => Err(Error::TransferRefused(
            "the groundings do not share a feasibility matrix".into(),
        )),
        GieKind::TcGie { .. } => {
            if sol1.policy_cost != p2.policy_cost() {
                return Err(Error::TransferRefused("solution and target use different policy costs".into()));
            }
            Ok(transferred(sol1))
        }
        GieKind::TGie => {
            if sol1.policy_cost != PolicyCost::Identity || p2.policy_cost() != PolicyCost::Identity {
                return Err(Error::TransferRefused(
                    "t-GIE transfer needs both sides solved without low-level costs".into(),
                ));
            }
            Ok(transferred(sol1))
        }
    }
}

fn transferred(sol: &GsSolution) -> GsSolution {
    GsSolution {
        iterations: 0,
        sweeps: 0,
        ..sol.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_space::build_gridworld;
    use crate::ensemble::build_complete_ensemble;
    use crate::og_task::OgTask;
    use crate::tlmdp::solve_gs;
    use std::sync::Arc;

    #[test]
    fn identical_groundings_are_tc_gie_with_unit_gamma() {
        let space = Arc::new(build_gridworld(4, 4, &[]).unwrap());
        let e = build_complete_ensemble(&space, 10.0, 1e-12).unwrap();
        let task = OgTask::unordered(3, 1.0).unwrap();
        let g = Grounding::at_states(&space, &[0, 5, 14]).unwrap();
        let p1 = TlmdpProblem::new(&e, &task, g.clone()).unwrap();
        let p2 = reground(&p1, g).unwrap();
        let v = check_gie(&p1, &p2, 1e-9).unwrap();
        assert_eq!(v.kind, GieKind::TcGie { gamma: 1.0 });
        let s1 = solve_gs(&p1, 1e-12).unwrap();
        let s2 = solve_gs(&p2, 1e-12).unwrap();
        assert_eq!(s1.log_z, s2.log_z);
        let z = zero_shot_apply(&s1, &p2, &v).unwrap();
        assert_eq!(z.iterations, 0);
        for i in 0..3 {
            assert_eq!(v.s1.get(i, i), 0.0);
        }
    }

    #[test]
    fn none_verdict_is_refused() {
        let space = Arc::new(build_gridworld(3, 1, &[(1, 0)]).unwrap());
        let e = build_complete_ensemble(&space, 10.0, 1e-12).unwrap();
        let task = OgTask::unordered(1, 1.0).unwrap();
        let p1 = TlmdpProblem::new(&e, &task, Grounding::at_states(&space, &[0]).unwrap()).unwrap();
        let s1 = solve_gs(&p1, 1e-12).unwrap();
        let mut v = check_gie(&p1, &p1, 1e-9).unwrap();
        v.kind = GieKind::None;
        assert!(matches!(zero_shot_apply(&s1, &p1, &v), Err(Error::TransferRefused(_))));
        v.kind = GieKind::TGie;
        assert!(matches!(zero_shot_apply(&s1, &p1, &v), Err(Error::TransferRefused(_))));
    }
}
